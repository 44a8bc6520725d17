use proptest::prelude::*;
use tpdm_nn::ops::*;
use tpdm_nn::Tensor;

fn tensor(dims: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = dims.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(dims.clone(), d).unwrap())
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, len) = x.shape2().unwrap();
    let (cout, k) = (w.dims()[0], w.dims()[2]);
    let out_len = (len + 2 * pad - k) / stride + 1;
    Tensor::from_fn(&[cout, out_len], |i| {
        let (o, t) = (i / out_len, i % out_len);
        let mut acc = 0.0;
        for c in 0..cin {
            for j in 0..k {
                let pos = (t * stride + j) as isize - pad as isize;
                if (0..len as isize).contains(&pos) {
                    acc += w.data()[(o * cin + c) * k + j] * x.data()[c * len + pos as usize];
                }
            }
        }
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv1d_matches_direct_sum(
        (x, w) in (1usize..4, 1usize..4, 1usize..5, 5usize..20)
            .prop_flat_map(|(cin, cout, k, len)| (tensor(vec![cin, len]), tensor(vec![cout, cin, k]))),
        stride in 1usize..4,
        pad in 0usize..3,
    ) {
        let got = conv1d_forward(&x, &w, None, stride, pad).unwrap();
        let want = naive_conv(&x, &w, stride, pad);
        prop_assert_eq!(got.dims(), want.dims());
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matmul_matches_direct_sum(
        (a, b) in (1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, k, n)| (tensor(vec![m, k]), tensor(vec![k, n]))),
    ) {
        let (m, k) = a.shape2().unwrap();
        let n = b.dims()[1];
        let want = Tensor::from_fn(&[m, n], |i| (0..k).map(|j| a.data()[i / n * k + j] * b.data()[j * n + i % n]).sum());
        prop_assert!(matmul_forward(&a, &b, false, false).unwrap().max_abs_diff(&want) < 1e-12);
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        prop_assert!(matmul_forward(&at, &bt, true, true).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 1usize..9).prop_flat_map(|(r, c)| tensor(vec![r, c])), shift in -50.0f64..50.0) {
        let y = softmax_rows(&x).unwrap();
        let cols = x.dims()[1];
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = softmax_rows(&x.map(|v| v + shift)).unwrap();
        prop_assert!(shifted.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn group_norm_standardizes_groups(
        x in (1usize..4, 2usize..4, 4usize..12).prop_flat_map(|(g, per, l)| tensor(vec![g * per, l]).prop_map(move |t| (g, t))),
    ) {
        let (groups, x) = x;
        let (c, l) = x.shape2().unwrap();
        let (y, _) = group_norm_forward(&x, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), groups, 0.0).unwrap();
        for g in y.data().chunks(c / groups * l) {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6 || var < 1e-9);
        }
    }

    #[test]
    fn nearest_resampling_round_trips_integer_upsampling(x in (1usize..4, 1usize..10).prop_flat_map(|(r, l)| tensor(vec![r, l])), factor in 1usize..5) {
        let l = x.dims()[1];
        let up = resample_nearest(&x, l * factor).unwrap();
        prop_assert_eq!(resample_nearest(&up, l).unwrap(), x);
    }
}
