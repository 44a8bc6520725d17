//! Scalar (and optional joint 16-dimensional) k-means codebooks for
//! loudness quantization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CODEBOOK_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 32;

#[derive(Debug, Error)]
pub enum VqError {
    #[error("need at least {needed} distinct values, found {found}")]
    InsufficientDistinctValues { needed: usize, found: usize },
    #[error("codebook has no centroids")]
    EmptyCodebook,
    #[error("index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("unsupported codebook version {found} (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("invalid codebook: {0}")]
    Invalid(String),
    #[error("codebook JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMetadata {
    pub samples: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Recorded in the metadata; initialization is deterministic.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iters: 100, tol: 1e-6, seed: 0 }
    }
}

/// Ascending scalar centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<f64>,
    pub metadata: FitMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalarFile {
    version: u32,
    k: usize,
    centroids: Vec<f64>,
    metadata: FitMetadata,
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>, VqError> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(VqError::Invalid(format!("non-finite training value {v}")));
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(xs)
}

fn distinct_count(sorted: &[f64]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Index of the nearest of ascending `centroids`; ties go to the lower index.
fn nearest(centroids: &[f64], value: f64) -> usize {
    let hi = centroids.partition_point(|&c| c < value);
    if hi == 0 {
        return 0;
    }
    if hi == centroids.len() {
        return hi - 1;
    }
    if value - centroids[hi - 1] <= centroids[hi] - value {
        hi - 1
    } else {
        hi
    }
}

/// Lloyd iterations from quantile initialization on sorted data.
/// Returns centroids and the iteration count.
fn lloyd(xs: &[f64], k: usize, opts: &FitOptions) -> (Vec<f64>, usize) {
    let n = xs.len();
    let mut c: Vec<f64> = (0..k).map(|j| xs[(((j as f64 + 0.5) / k as f64) * n as f64) as usize]).collect();
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        c.sort_by(f64::total_cmp);
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for &x in xs {
            let j = nearest(&c, x);
            sum[j] += x;
            count[j] += 1;
        }
        let mut next: Vec<f64> = (0..k).map(|j| if count[j] > 0 { sum[j] / count[j] as f64 } else { f64::NAN }).collect();
        for j in 0..k {
            if count[j] == 0 {
                // Re-seed at the point worst served by the current centroids.
                let far = xs
                    .iter()
                    .copied()
                    .max_by(|&a, &b| {
                        let da = (a - next_nearest(&next, a)).abs();
                        let db = (b - next_nearest(&next, b)).abs();
                        da.total_cmp(&db)
                    })
                    .expect("non-empty data");
                next[j] = far;
            }
        }
        let moved = c.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        c = next;
        if moved < opts.tol {
            break;
        }
    }
    c.sort_by(f64::total_cmp);
    (c, iterations)
}

fn next_nearest(c: &[f64], x: f64) -> f64 {
    c.iter()
        .filter(|v| !v.is_nan())
        .copied()
        .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
        .unwrap_or(x)
}

/// Prefix sums of centred data for O(1) segment costs.
struct Segments {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Segments {
    fn new(xs: &[f64]) -> Self {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let mut s1 = vec![0.0; xs.len() + 1];
        let mut s2 = vec![0.0; xs.len() + 1];
        for (i, &x) in xs.iter().enumerate() {
            let d = x - mean;
            s1[i + 1] = s1[i] + d;
            s2[i + 1] = s2[i] + d * d;
        }
        Segments { s1, s2 }
    }

    /// Sum of squared deviations from the mean of `xs[i..j]`.
    fn cost(&self, i: usize, j: usize) -> f64 {
        let n = (j - i) as f64;
        let s = self.s1[j] - self.s1[i];
        (self.s2[j] - self.s2[i] - s * s / n).max(0.0)
    }
}

/// Globally optimal contiguous partition of sorted data into `k` clusters,
/// by dynamic programming with divide-and-conquer over monotone split points.
/// Returns the cluster boundaries `[0, b1, ..., n]`.
fn optimal_partition(xs: &[f64], k: usize) -> Vec<usize> {
    let n = xs.len();
    let seg = Segments::new(xs);
    let mut prev: Vec<f64> = (0..=n).map(|j| if j == 0 { 0.0 } else { seg.cost(0, j) }).collect();
    let mut splits = vec![vec![0usize; n + 1]; k];
    for layer in 1..k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let arg = &mut splits[layer];
        solve_layer(&seg, &prev, &mut cur, arg, layer + 1, n, layer, n - 1);
        prev = cur;
    }
    let mut bounds = vec![n];
    let mut j = n;
    for layer in (1..k).rev() {
        j = splits[layer][j];
        bounds.push(j);
    }
    bounds.push(0);
    bounds.reverse();
    bounds
}

/// Fills `cur[j]` for `j in lo..=hi` knowing the optimal split lies in
/// `opt_lo..=opt_hi`.
#[allow(clippy::too_many_arguments)]
fn solve_layer(
    seg: &Segments,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [usize],
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut best_i = opt_lo;
    for i in opt_lo..=opt_hi.min(mid - 1) {
        let v = prev[i] + seg.cost(i, mid);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    cur[mid] = best;
    arg[mid] = best_i;
    if mid > lo {
        solve_layer(seg, prev, cur, arg, lo, mid - 1, opt_lo, best_i);
    }
    solve_layer(seg, prev, cur, arg, mid + 1, hi, best_i, opt_hi);
}

/// Total squared distance of each value to its nearest centroid.
pub fn within_cluster_cost(values: &[f64], centroids: &[f64]) -> f64 {
    let mut c = centroids.to_vec();
    c.sort_by(f64::total_cmp);
    values.iter().map(|&x| (x - c[nearest(&c, x)]).powi(2)).sum()
}

impl Codebook {
    pub fn new(mut centroids: Vec<f64>, metadata: FitMetadata) -> Result<Self, VqError> {
        if centroids.is_empty() {
            return Err(VqError::EmptyCodebook);
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(VqError::Invalid("non-finite centroid".into()));
        }
        centroids.sort_by(f64::total_cmp);
        centroids.dedup();
        Ok(Codebook { centroids, metadata })
    }

    /// Lloyd's algorithm from quantile initialization, finished with an exact
    /// optimal-partition pass so the result is the global 1-D optimum.
    pub fn fit(values: &[f64], k: usize, opts: &FitOptions) -> Result<Self, VqError> {
        let xs = sorted_finite(values)?;
        let distinct = distinct_count(&xs);
        if k == 0 || distinct < k {
            return Err(VqError::InsufficientDistinctValues { needed: k.max(1), found: distinct });
        }
        let (lloyd_c, iterations) = lloyd(&xs, k, opts);
        let bounds = optimal_partition(&xs, k);
        let optimal: Vec<f64> = bounds
            .windows(2)
            .map(|w| xs[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
            .collect();
        let centroids = if within_cluster_cost(&xs, &optimal) <= within_cluster_cost(&xs, &lloyd_c) {
            optimal
        } else {
            lloyd_c
        };
        Codebook::new(centroids, FitMetadata { samples: values.len(), iterations, seed: opts.seed })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn encode(&self, value: f64) -> usize {
        nearest(&self.centroids, value)
    }

    pub fn decode(&self, index: usize) -> Result<f64, VqError> {
        self.centroids.get(index).copied().ok_or(VqError::IndexOutOfRange { index, k: self.k() })
    }

    pub fn to_json(&self) -> String {
        let file = ScalarFile {
            version: CODEBOOK_VERSION,
            k: self.k(),
            centroids: self.centroids.clone(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&file).expect("finite values serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, VqError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        check_version(&raw)?;
        let file: ScalarFile = serde_json::from_value(raw)?;
        validate_centroids(&file.centroids, file.k)?;
        Ok(Codebook { centroids: file.centroids, metadata: file.metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VqError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VqError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_version(raw: &serde_json::Value) -> Result<(), VqError> {
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CODEBOOK_VERSION as u64 => Ok(()),
        Some(v) => Err(VqError::SchemaVersionMismatch { found: v.min(u32::MAX as u64) as u32, expected: CODEBOOK_VERSION }),
        None => Err(VqError::Invalid("missing or non-integer version".into())),
    }
}

fn validate_centroids(c: &[f64], k: usize) -> Result<(), VqError> {
    if c.is_empty() {
        return Err(VqError::EmptyCodebook);
    }
    if c.len() != k {
        return Err(VqError::Invalid(format!("k = {k} but {} centroids", c.len())));
    }
    if !c.windows(2).all(|w| w[0] < w[1]) {
        return Err(VqError::Invalid("centroids not strictly ascending".into()));
    }
    Ok(())
}

/// Codebook over whole 16-segment loudness vectors, clustered jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct JointCodebook {
    dim: usize,
    centroids: Vec<Vec<f64>>,
    pub metadata: FitMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    version: u32,
    k: usize,
    dim: usize,
    centroids: Vec<Vec<f64>>,
    metadata: FitMetadata,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl JointCodebook {
    /// Lloyd's algorithm in `dim` dimensions. Vectors are ordered by their
    /// mean and the initial centroid `j` is the `(j + 0.5) / k` quantile
    /// of that ordering.
    pub fn fit(vectors: &[Vec<f64>], k: usize, opts: &FitOptions) -> Result<Self, VqError> {
        let dim = vectors.first().map(Vec::len).ok_or(VqError::InsufficientDistinctValues { needed: k, found: 0 })?;
        if dim == 0 || vectors.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(VqError::Invalid("vectors must share a non-zero dimension and be finite".into()));
        }
        let mut order: Vec<&Vec<f64>> = vectors.iter().collect();
        order.sort_by(|a, b| {
            let ma: f64 = a.iter().sum();
            let mb: f64 = b.iter().sum();
            ma.total_cmp(&mb).then_with(|| a.partial_cmp(b).expect("finite"))
        });
        let mut distinct = order.clone();
        distinct.dedup();
        if k == 0 || distinct.len() < k {
            return Err(VqError::InsufficientDistinctValues { needed: k.max(1), found: distinct.len() });
        }
        let n = order.len();
        let mut c: Vec<Vec<f64>> = (0..k).map(|j| order[(((j as f64 + 0.5) / k as f64) * n as f64) as usize].clone()).collect();
        let mut iterations = 0;
        for _ in 0..opts.max_iters {
            iterations += 1;
            let mut sum = vec![vec![0.0; dim]; k];
            let mut count = vec![0usize; k];
            for v in vectors {
                let j = nearest_vec(&c, v);
                count[j] += 1;
                sum[j].iter_mut().zip(v).for_each(|(s, x)| *s += x);
            }
            let mut moved = 0.0f64;
            for j in 0..k {
                let next = if count[j] > 0 {
                    sum[j].iter().map(|s| s / count[j] as f64).collect()
                } else {
                    vectors
                        .iter()
                        .max_by(|a, b| sq_dist(a, &c[nearest_vec(&c, a)]).total_cmp(&sq_dist(b, &c[nearest_vec(&c, b)])))
                        .expect("non-empty")
                        .clone()
                };
                moved = moved.max(sq_dist(&c[j], &next).sqrt());
                c[j] = next;
            }
            if moved < opts.tol {
                break;
            }
        }
        c.dedup();
        Ok(JointCodebook { dim, centroids: c, metadata: FitMetadata { samples: vectors.len(), iterations, seed: opts.seed } })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn encode(&self, vector: &[f64]) -> Result<usize, VqError> {
        if vector.len() != self.dim {
            return Err(VqError::Invalid(format!("vector of length {} for dim {}", vector.len(), self.dim)));
        }
        Ok(nearest_vec(&self.centroids, vector))
    }

    pub fn decode(&self, index: usize) -> Result<&[f64], VqError> {
        self.centroids.get(index).map(Vec::as_slice).ok_or(VqError::IndexOutOfRange { index, k: self.k() })
    }

    pub fn to_json(&self) -> String {
        let file = JointFile {
            version: CODEBOOK_VERSION,
            k: self.k(),
            dim: self.dim,
            centroids: self.centroids.clone(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&file).expect("finite values serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, VqError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        check_version(&raw)?;
        let file: JointFile = serde_json::from_value(raw)?;
        if file.centroids.is_empty() {
            return Err(VqError::EmptyCodebook);
        }
        if file.centroids.len() != file.k || file.dim == 0 {
            return Err(VqError::Invalid("k or dim inconsistent with centroids".into()));
        }
        if file.centroids.iter().any(|c| c.len() != file.dim || c.iter().any(|x| !x.is_finite())) {
            return Err(VqError::Invalid("centroid with wrong dimension".into()));
        }
        Ok(JointCodebook { dim: file.dim, centroids: file.centroids, metadata: file.metadata })
    }
}

fn nearest_vec(c: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, cj) in c.iter().enumerate() {
        let d = sq_dist(cj, v);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Either codebook flavour, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum LoudnessCodebook {
    Scalar(Codebook),
    Joint(JointCodebook),
}

impl LoudnessCodebook {
    pub fn k(&self) -> usize {
        match self {
            LoudnessCodebook::Scalar(c) => c.k(),
            LoudnessCodebook::Joint(c) => c.k(),
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            LoudnessCodebook::Scalar(c) => c.to_json(),
            LoudnessCodebook::Joint(c) => c.to_json(),
        }
    }

    /// Dispatches on the presence of a `dim` field.
    pub fn from_json(text: &str) -> Result<Self, VqError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if raw.get("dim").is_some() {
            JointCodebook::from_json(text).map(LoudnessCodebook::Joint)
        } else {
            Codebook::from_json(text).map(LoudnessCodebook::Scalar)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VqError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VqError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
