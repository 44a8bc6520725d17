//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measurements; the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tpdm_cli::{cmd_convert, ConvertArgs};
use tpdm_core::audio::AudioClip;
use tpdm_core::dataset::{
    generate_corpus, pitch_row_index, render_score, sample_score, CorpusSpec, RenderOptions, TimbrePreset,
    DURATION_COUNTS, PITCH_COUNTS,
};
use tpdm_core::diffusion::*;
use tpdm_core::evaluation::{evaluate, EvalOptions};
use tpdm_core::loudness::{clip_loudness, integrated_loudness, k_weight};
use tpdm_core::pitch::{pitch_track, tokenize_f0, F0Params, PITCH_TABLE};
use tpdm_core::training::*;
use tpdm_core::vq::{within_cluster_cost, Codebook, FitMetadata, FitOptions, LoudnessCodebook};
use tpdm_nn::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use tpdm_nn::{Conv1d, GroupNorm, Linear, ParamStore, Scalar, SelfAttention, Tensor};

// Tolerances and budgets.
const C2_CONFORMANCE_LKFS: f64 = -3.01;
const C2_CONFORMANCE_TOL: f64 = 0.10;
const C2_HALVING_LU: f64 = -6.02;
const C2_HALVING_TOL: f64 = 0.01;
const C3_COST_TOL: f64 = 1e-9;
const C4_UNIT_CIRCLE_TOL: f64 = 1e-12;
const C4_ROUND_TRIP_TOL: f64 = 1e-6;
const C4_DDIM_TOL: f64 = 1e-4;
const C5_LAYER_TOL: f64 = 1e-6;
const C5_UNET_TOL: f64 = 1e-2;
const C6_SHARE_TOL: f64 = 0.01;
const C7_MIN_RECOVERY: f64 = 0.90;
const C8_MIN_LOSS_DROP: f64 = 0.80;
const C8_MIN_PITCH_ACCURACY: f64 = 0.70;
const C8_MAX_MEAN_LU: f64 = 6.0;

const C1_BUDGET: Duration = Duration::from_secs(1);
const C2_BUDGET: Duration = Duration::from_secs(5);
const C3_BUDGET: Duration = Duration::from_secs(30);
const C4_BUDGET: Duration = Duration::from_secs(10);
const C5_BUDGET: Duration = Duration::from_secs(120);
const C6_BUDGET: Duration = Duration::from_secs(60);
const C7_BUDGET: Duration = Duration::from_secs(120);
const C8_BUDGET: Duration = Duration::from_secs(30 * 60);
const C9_BUDGET: Duration = Duration::from_secs(300);

// Overfit run settings.
const C8_STEPS: u64 = 2000;
const C8_LEARNING_RATE: f64 = 1e-3;
const C8_WARMUP: u64 = 100;
const C8_PROBES: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!(
            "panicked: {}",
            e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        ),
    });
    let elapsed = start.elapsed();
    let pass = out.pass && elapsed <= budget;
    println!(
        "criterion {id} ({name}): {} | {} | {:.1} s of {} s",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn sine(freq: f64, amp: f64, n: usize, sr: u32) -> AudioClip {
    AudioClip::new(
        (0..n).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32).collect(),
        sr,
    )
}

fn c1_table() -> Outcome {
    let mut exact = usize::from(tokenize_f0(0.0) == Ok(0));
    for entry in &PITCH_TABLE[1..] {
        if tokenize_f0(entry.f0) == Ok(entry.index) {
            exact += 1;
        }
    }
    Outcome { pass: exact == 37, detail: format!("{exact}/37 exact") }
}

fn c2_loudness() -> Outcome {
    let tone = sine(997.0, 1.0, 48_000 * 5, 48_000);
    let conformance = integrated_loudness(&k_weight(&tone).unwrap()).unwrap();
    let silence = clip_loudness(&AudioClip::silence(48_000, 48_000)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_shift = 0.0f64;
    let mut readings = 0;
    for i in 0..12 {
        let sr = [16_000, 44_100, 48_000][i % 3];
        let clip = if i % 4 == 3 {
            AudioClip::new((0..sr as usize).map(|_| rng.random_range(-0.5f32..0.5)).collect(), sr)
        } else {
            sine(rng.random_range(50.0..6000.0), rng.random_range(0.05..1.0), sr as usize, sr)
        };
        let half = AudioClip::new(clip.samples.iter().map(|v| v * 0.5).collect(), sr);
        let (a, b) = (clip_loudness(&clip).unwrap(), clip_loudness(&half).unwrap());
        if a > -70.0 + 7.0 {
            readings += 1;
            worst_shift = worst_shift.max(((b - a) - C2_HALVING_LU).abs());
        }
    }
    let pass = (conformance - C2_CONFORMANCE_LKFS).abs() <= C2_CONFORMANCE_TOL
        && silence == -70.0
        && readings >= 10
        && worst_shift <= C2_HALVING_TOL;
    Outcome {
        pass,
        detail: format!(
            "997 Hz 0 dBFS = {conformance:.3} LKFS, silence = {silence:.1}, halving off by at most {worst_shift:.4} LU over {readings} signals"
        ),
    }
}

/// Best within-cluster cost over every split of sorted `values` into `k`
/// contiguous non-empty groups.
fn enumeration_oracle(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    fn group_cost(g: &[f64]) -> f64 {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        g.iter().map(|v| (v - m) * (v - m)).sum()
    }
    fn best(v: &[f64], k: usize) -> f64 {
        if k == 1 {
            return group_cost(v);
        }
        (1..=v.len() - (k - 1)).map(|cut| group_cost(&v[..cut]) + best(&v[cut..], k - 1)).fold(f64::INFINITY, f64::min)
    }
    best(&sorted, k)
}

fn c3_vq() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let sets = 40;
    for s in 0..sets {
        let n = rng.random_range(4..=64);
        let k = rng.random_range(1..=4);
        let values: Vec<f64> = (0..n)
            .map(|_| if s % 2 == 0 { rng.random_range(-70.0..0.0) } else { rng.random_range(0..6) as f64 * 3.0 + rng.random_range(0.0..0.5) })
            .collect();
        let cb = Codebook::fit(&values, k, &FitOptions { seed: s, ..FitOptions::default() }).unwrap();
        let got = within_cluster_cost(&values, cb.centroids());
        worst = worst.max(got - enumeration_oracle(&values, k));
    }
    Outcome { pass: worst <= C3_COST_TOL, detail: format!("{sets} datasets, worst excess cost {worst:.3e}") }
}

fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.sample(StandardNormal))
}

fn c4_algebra() -> Outcome {
    let mut circle = 0.0f64;
    for i in 0..1000 {
        let (a, s) = alpha_sigma(i as f64 / 999.0).unwrap();
        circle = circle.max((a * a + s * s - 1.0).abs());
    }
    let x0 = randn(&[1, 256], 40);
    let eps = randn(&[1, 256], 41);
    let mut round_trip = 0.0f64;
    for i in 0..=20 {
        let t = i as f64 / 20.0;
        let x_t = q_sample(&x0, &eps, t).unwrap();
        let v = v_target(&x0, &eps, t).unwrap();
        round_trip = round_trip.max(x0_from_v(&x_t, &v, t).unwrap().max_abs_diff(&x0));
        round_trip = round_trip.max(eps_from_v(&x_t, &v, t).unwrap().max_abs_diff(&eps));
    }
    let oracle = |x_t: &Tensor<f64>, t: f64| -> Result<Tensor<f64>, DiffusionError> {
        let (a, s) = alpha_sigma(t)?;
        if s == 0.0 {
            return Ok(Tensor::zeros(x_t.dims()));
        }
        Ok(Tensor::from_fn(x_t.dims(), |i| a * (x_t.data()[i] - a * x0.data()[i]) / s - s * x0.data()[i]))
    };
    let mut ddim = Vec::new();
    for steps in [1usize, 5, 50] {
        let err = ddim_sample(&oracle, &[1, 256], steps, 4).unwrap().max_abs_diff(&x0);
        ddim.push((steps, err));
    }
    let ddim_worst = ddim.iter().map(|d| d.1).fold(0.0, f64::max);
    let ddim: Vec<String> = ddim.iter().map(|(s, e)| format!("{s} steps {e:.1e}")).collect();
    Outcome {
        pass: circle <= C4_UNIT_CIRCLE_TOL && round_trip <= C4_ROUND_TRIP_TOL && ddim_worst <= C4_DDIM_TOL,
        detail: format!("|a^2+s^2-1| <= {circle:.1e}, round trip {round_trip:.1e}, DDIM error {}", ddim.join(", ")),
    }
}

fn pattern(dims: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::from_fn(dims, |i| ((i as f64 + 1.0) * 0.618 + seed as f64).sin())
}

fn layer_reports() -> Vec<(&'static str, GradCheckReport)> {
    let opts = GradCheckOptions { step: 1e-5, max_elements: None, seed: 1 };
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(50);

    let mut store = ParamStore::<f64>::new();
    let fc = Linear::new(&mut store, "fc", 5, 3, &mut rng);
    let x = store.normal("x", &[4, 5], 1.0, &mut rng);
    let r = check_gradients(&mut store, |g| {
        let xv = g.param(x);
        let y = fc.forward(g, xv)?;
        g.weighted_sum(y, pattern(&[4, 3], 1))
    }, &opts);
    out.push(("linear", r.unwrap()));

    let mut store = ParamStore::<f64>::new();
    let same = Conv1d::same(&mut store, "c1", 3, 4, 3, &mut rng);
    let down = Conv1d::new(&mut store, "c2", 4, 2, 4, 4, 0, &mut rng);
    let x = store.normal("x", &[3, 16], 1.0, &mut rng);
    let r = check_gradients(&mut store, |g| {
        let xv = g.param(x);
        let h = same.forward(g, xv)?;
        let y = down.forward(g, h)?;
        g.weighted_sum(y, pattern(&[2, 4], 2))
    }, &opts);
    out.push(("conv1d", r.unwrap()));

    let mut store = ParamStore::<f64>::new();
    let gn = GroupNorm::new(&mut store, "gn", 6, 3);
    store.get_mut(gn.gamma).value = pattern(&[6], 7);
    store.get_mut(gn.beta).value = pattern(&[6], 8);
    let x = store.normal("x", &[6, 9], 2.0, &mut rng);
    let r = check_gradients(&mut store, |g| {
        let xv = g.param(x);
        let y = gn.forward(g, xv)?;
        g.weighted_sum(y, pattern(&[6, 9], 3))
    }, &opts);
    out.push(("group norm", r.unwrap()));

    let mut store = ParamStore::<f64>::new();
    let x = store.normal("x", &[3, 7], 2.0, &mut rng);
    let r = check_gradients(&mut store, |g| {
        let xv = g.param(x);
        let y = g.silu(xv)?;
        g.weighted_sum(y, pattern(&[3, 7], 4))
    }, &opts);
    out.push(("silu", r.unwrap()));

    let mut store = ParamStore::<f64>::new();
    let attn = SelfAttention::new(&mut store, "attn", 8, 2, &mut rng).unwrap();
    let x = store.normal("x", &[8, 6], 1.0, &mut rng);
    let r = check_gradients(&mut store, |g| {
        let xv = g.param(x);
        let y = attn.forward(g, xv)?;
        g.weighted_sum(y, pattern(&[8, 6], 5))
    }, &opts);
    out.push(("self-attention", r.unwrap()));

    let mut store = ParamStore::<f64>::new();
    let a = store.normal("a", &[2, 5], 1.0, &mut rng);
    let b = store.normal("b", &[3, 5], 1.0, &mut rng);
    let bias = store.normal("bias", &[5], 1.0, &mut rng);
    let r = check_gradients(&mut store, |g| {
        let (av, bv, biasv) = (g.param(a), g.param(b), g.param(bias));
        let cat = g.concat_rows(&[av, bv])?;
        let t = g.transpose(cat)?;
        let up = g.resample_nearest(t, 12)?;
        let biased = g.add_row_bias(up, biasv)?;
        let sl = g.slice_rows(biased, 1, 4)?;
        let sq = g.mul(sl, sl)?;
        let sm = g.softmax_rows(sq)?;
        let mm = g.matmul(sm, biased, false, true)?;
        let mm = g.scale(mm, 0.5)?;
        g.weighted_sum(mm, pattern(&[3, 5], 6))
    }, &opts);
    out.push(("structural", r.unwrap()));
    out
}

fn tiny_unet_report<T: Scalar>(opts: &GradCheckOptions) -> GradCheckReport {
    let config = ModelConfig {
        unet: UNetConfig {
            input_length: 256,
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            downsample_factors: vec![4, 4],
            attention_levels: vec![1],
            mid_attention: true,
            attention_heads: 2,
            ..UNetConfig::default()
        },
        pitch_dim: 2,
        loudness_dim: 2,
        codebook_size: 4,
        hop_samples: 32,
    }
    .normalized();
    let mut model = TimbreModel::<f64>::new(config, 6).unwrap();
    let head = model.unet.output_conv().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in [head.weight, head.bias] {
        let p = model.store.get_mut(id);
        p.value = Tensor::from_fn(p.value.dims(), |_| rng.random_range(-0.3..0.3));
    }
    let mut model = model.cast::<T>();
    let x0: Tensor<T> = randn(&[1, 256], 10).cast();
    let noise: Tensor<T> = randn(&[1, 256], 11).cast();
    let tokens = ConditionTokens { pitch: (0..8).map(|i| 5 + i).collect(), loudness: (0..8).map(|i| i % 4).collect() };
    let shadow = TimbreModel::<T> { store: Default::default(), ..model.clone() };
    check_gradients(
        &mut model.store,
        |g| {
            shadow.element_loss(g, &x0, &noise, 0.3, &tokens).map_err(|e| match e {
                DiffusionError::Nn(n) => n,
                other => panic!("{other}"),
            })
        },
        opts,
    )
    .unwrap()
}

fn c5_gradients() -> Outcome {
    let layers = layer_reports();
    let layer_worst = layers.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
    let per_layer: Vec<String> = layers.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error())).collect();
    let unet = tiny_unet_report::<f32>(&GradCheckOptions { step: 1e-3, max_elements: Some(6), seed: 2 });
    let unet_err = unet.global_rel_error();
    Outcome {
        pass: layer_worst < C5_LAYER_TOL && unet_err < C5_UNET_TOL,
        detail: format!("64-bit layers [{}], 32-bit tiny U-Net {unet_err:.2e} over {} tensors", per_layer.join(", "), unet.params.len()),
    }
}

fn c6_histograms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pitch = BTreeMap::<usize, usize>::new();
    let mut dur = BTreeMap::<u32, usize>::new();
    let mut notes = 0;
    while notes < 100_000 {
        let score = sample_score(&mut rng, 960 * 600).unwrap();
        // The last note of each score is cut at the boundary.
        for n in &score.notes[..score.notes.len() - 1] {
            *pitch.entry(n.pitch).or_default() += 1;
            *dur.entry(n.duration_tick).or_default() += 1;
            notes += 1;
        }
    }
    let p_total: u32 = PITCH_COUNTS.iter().map(|r| r.count).sum();
    let mut expected_pitch = BTreeMap::<usize, f64>::new();
    for row in &PITCH_COUNTS {
        *expected_pitch.entry(pitch_row_index(row)).or_default() += row.count as f64 / p_total as f64;
    }
    let mut worst_pitch = 0.0f64;
    for (idx, share) in &expected_pitch {
        let got = *pitch.get(idx).unwrap_or(&0) as f64 / notes as f64;
        worst_pitch = worst_pitch.max((got - share).abs());
    }
    let stray_pitch = pitch.keys().any(|k| !expected_pitch.contains_key(k));
    let d_total: u32 = DURATION_COUNTS.iter().map(|r| r.count).sum();
    let mut worst_dur = 0.0f64;
    for row in &DURATION_COUNTS {
        let got = *dur.get(&row.ticks).unwrap_or(&0) as f64 / notes as f64;
        worst_dur = worst_dur.max((got - row.count as f64 / d_total as f64).abs());
    }
    let eighth = *dur.get(&240).unwrap_or(&0) as f64 / notes as f64;
    let eighth_table = DURATION_COUNTS.iter().find(|r| r.ticks == 240).map_or(0, |r| r.count) as f64 / d_total as f64;
    Outcome {
        pass: worst_pitch <= C6_SHARE_TOL && worst_dur <= C6_SHARE_TOL && !stray_pitch,
        detail: format!(
            "{notes} notes, worst pitch share error {worst_pitch:.4}, worst duration share error {worst_dur:.4}, eighth share {eighth:.4} (table {eighth_table:.4})"
        ),
    }
}

fn c7_closure() -> Outcome {
    const RATE: u32 = 44_100;
    let params = F0Params::default();
    let mut worst = (1.0f64, String::new());
    let mut total = 0.0;
    let mut runs = 0;
    for preset in [TimbrePreset::piano(), TimbrePreset::violin(), TimbrePreset::flute()] {
        for s in 0..20u64 {
            let score = sample_score(&mut ChaCha8Rng::seed_from_u64(700 + s), 6 * 960).unwrap();
            let clip = render_score(&score, &preset, RATE, &RenderOptions::default()).unwrap();
            let track = pitch_track(&clip, &params).unwrap();
            let (mut hit, mut voiced) = (0, 0);
            for (t, &idx) in track.indices.iter().enumerate() {
                let centre_ticks = (t * params.hop_samples + params.hop_samples / 2) as f64 / RATE as f64 * 960.0;
                let truth = score.pitch_at(centre_ticks);
                if truth != 0 {
                    voiced += 1;
                    hit += usize::from(idx == truth);
                }
            }
            let acc = hit as f64 / voiced as f64;
            total += acc;
            runs += 1;
            if acc < worst.0 {
                worst = (acc, format!("{} score {s}", preset.name));
            }
        }
    }
    Outcome {
        pass: worst.0 >= C7_MIN_RECOVERY,
        detail: format!(
            "{runs} renders at {RATE} Hz, worst {:.3} ({}), mean {:.3}",
            worst.0,
            worst.1,
            total / runs as f64
        ),
    }
}

fn c8_overfit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&CorpusSpec { clips: 8, ..CorpusSpec::default() }, dir.path()).unwrap();
    let codebook = fit_codebook_from_corpus(&corpus, 32, 1 << 14, &FitOptions::default(), false).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let score = sample_score(&mut rng, 960).unwrap();
    let clip = render_score(&score, &TimbrePreset::piano(), 16_000, &RenderOptions::default()).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        learning_rate: C8_LEARNING_RATE,
        warmup_steps: C8_WARMUP,
        lr_decay: LrDecay::Cosine,
        max_steps: Some(C8_STEPS),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, codebook).unwrap();
    let segment = crop_segment(&clip, 1 << 14, &mut rng);
    let tokens = trainer.prepare(std::slice::from_ref(&segment)).unwrap().remove(0).tokens;

    // Fixed (t, noise) probes, t stratified over (0, 1), scored before and after.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(99);
    let probes: Vec<Draw> = (0..C8_PROBES)
        .map(|i| {
            let (_, noise) = draw_noise(&mut probe_rng, 1 << 14);
            Draw { x0: segment.clone(), tokens: tokens.clone(), t: (i as f64 + 0.5) / C8_PROBES as f64, noise }
        })
        .collect();
    let initial = loss_v(&trainer.model, &probes).unwrap();
    let mut first_window = Vec::new();
    let mut last_window = Vec::new();
    for step in 0..C8_STEPS {
        let loss = trainer.train_step(std::slice::from_ref(&segment)).unwrap();
        if step < 100 {
            first_window.push(loss);
        } else if step >= C8_STEPS - 100 {
            last_window.push(loss);
        }
    }
    let final_loss = loss_v(&trainer.model, &probes).unwrap();
    let drop = 1.0 - final_loss / initial;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let generated: Tensor<f32> =
        ddim_sample(&Conditioned { model: &trainer.model, tokens: &tokens }, &[1, 1 << 14], 50, 0).unwrap();
    let converted = AudioClip::new(generated.data()[..clip.len()].to_vec(), clip.sample_rate);
    let report = evaluate(&clip, &converted, &EvalOptions::default()).unwrap();
    Outcome {
        pass: drop >= C8_MIN_LOSS_DROP
            && report.pitch_accuracy >= C8_MIN_PITCH_ACCURACY
            && report.mean_abs_difference_lu <= C8_MAX_MEAN_LU,
        detail: format!(
            "probe loss {initial:.4} -> {final_loss:.4} (drop {:.1}%), training loss first/last 100 steps {:.4}/{:.4}, DDIM(50) pitch accuracy {:.3}, mean |loudness difference| {:.2} LU",
            100.0 * drop,
            mean(&first_window),
            mean(&last_window),
            report.pitch_accuracy,
            report.mean_abs_difference_lu
        ),
    }
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = ModelConfig {
        unet: UNetConfig {
            input_length: 4096,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            downsample_factors: vec![4, 4],
            attention_levels: vec![1],
            attention_heads: 2,
            ..UNetConfig::default()
        },
        pitch_dim: 8,
        loudness_dim: 8,
        codebook_size: 4,
        hop_samples: 512,
    }
    .normalized();
    let cfg = TrainConfig { segment_length: 4096, batch_size: 1, learning_rate: 1e-3, model, ..TrainConfig::default() };
    let meta = FitMetadata { samples: 4, iterations: 0, seed: 0 };
    let codebook = LoudnessCodebook::Scalar(Codebook::new(vec![-70.0, -40.0, -25.0, -12.0], meta).unwrap());
    let mut trainer = Trainer::new(cfg, codebook.clone()).unwrap();
    let score = sample_score(&mut ChaCha8Rng::seed_from_u64(90), 2 * 960).unwrap();
    let clip = render_score(&score, &TimbrePreset::violin(), 16_000, &RenderOptions::default()).unwrap();
    for i in 0..3u64 {
        trainer.train_step(&[crop_segment(&clip, 4096, &mut ChaCha8Rng::seed_from_u64(i))]).unwrap();
    }
    let ckpt_path = root.join("model.tpdm");
    save_checkpoint(&trainer, &ckpt_path).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    let seg = AudioClip::new(crop_segment(&clip, 4096, &mut ChaCha8Rng::seed_from_u64(0)).into_data(), 16_000);
    let tokens = condition_tokens(&seg, &codebook, &F0Params::default()).unwrap();
    let before: Tensor<f32> = ddim_sample(&Conditioned { model: &trainer.model, tokens: &tokens }, &[1, 4096], 10, 3).unwrap();
    let after: Tensor<f32> = ddim_sample(&Conditioned { model: &loaded.model, tokens: &tokens }, &[1, 4096], 10, 3).unwrap();
    let sampler_identical = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let cb_path = root.join("codebook.json");
    codebook.save(&cb_path).unwrap();
    let input = root.join("input.wav");
    tpdm_core::audio::write_wav(&clip, &input, tpdm_core::audio::BitDepth::Float32).unwrap();
    let convert = |output: &Path| {
        cmd_convert(&ConvertArgs {
            input: input.clone(),
            checkpoint: ckpt_path.clone(),
            codebook: cb_path.clone(),
            output: output.to_path_buf(),
            steps: Some(10),
            seed: Some(42),
            overlap: None,
            eta: None,
            config: None,
        })
        .map_err(|f| f.message)
    };
    let (a, b) = (root.join("a.wav"), root.join("b.wav"));
    let runs = convert(&a).and_then(|_| convert(&b));
    let wav_identical = runs.is_ok() && std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    Outcome {
        pass: sampler_identical && wav_identical,
        detail: format!(
            "convert twice with seed 42: {} ({}), sampler output across checkpoint save/load: {}",
            if wav_identical { "bit-identical" } else { "differs" },
            runs.map(|_| format!("{} bytes", std::fs::metadata(&a).map(|m| m.len()).unwrap_or(0))).unwrap_or_else(|e| e),
            if sampler_identical { "bit-identical" } else { "differs" }
        ),
    }
}

fn main() {
    // `cargo test -- <filter>` style arguments select criteria by number.
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |id: u32| wanted.is_empty() || wanted.contains(&id);
    let mut all = true;
    if run(1) {
        all &= check(1, "pitch table conformance", C1_BUDGET, c1_table);
    }
    if run(2) {
        all &= check(2, "loudness meter conformance", C2_BUDGET, c2_loudness);
    }
    if run(3) {
        all &= check(3, "codebook optimality", C3_BUDGET, c3_vq);
    }
    if run(4) {
        all &= check(4, "diffusion algebra", C4_BUDGET, c4_algebra);
    }
    if run(5) {
        all &= check(5, "gradient checks", C5_BUDGET, c5_gradients);
    }
    if run(6) {
        all &= check(6, "dataset statistics", C6_BUDGET, c6_histograms);
    }
    if run(7) {
        all &= check(7, "pipeline closure", C7_BUDGET, c7_closure);
    }
    if run(8) {
        all &= check(8, "end-to-end overfit", C8_BUDGET, c8_overfit);
    }
    if run(9) {
        all &= check(9, "determinism", C9_BUDGET, c9_determinism);
    }
    if !all {
        std::process::exit(1);
    }
}
