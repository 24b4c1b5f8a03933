//! Evaluation: two-sample statistics (MMD, energy distance), ranking (AUROC),
//! conditional and compositional sampling, cosine-similarity histograms, and
//! the norm-flexibility construction check.

use crate::energy::{concept_sum, unit_rows, EnergyModel, UnitLatent};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::fork;
use crate::sgld::{run_chains_parallel, ConditionalEnergy, SgldConfig, UniformInit};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// A reproducible metric record.
#[derive(Clone, Debug)]
pub struct ScoreReport {
    pub metric: String,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl ScoreReport {
    pub fn csv_header() -> &'static str {
        "metric,value,n_a,n_b,config_hash,seed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.metric, self.value, self.n_a, self.n_b, self.config_hash, self.seed
        )
    }
}

// ── kernels and two-sample statistics ───────────────────────────────────

/// Median pairwise distance over a deterministic subsample of the pooled
/// points (the multi-bandwidth base scale).
pub fn median_heuristic(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let total = a.nrows() + b.nrows();
    let cap = 2048usize.min(total);
    let stride = (total as f64 / cap as f64).max(1.0);
    let mut points: Vec<ndarray::ArrayView1<'_, f64>> = Vec::with_capacity(cap);
    let mut t = 0.0f64;
    while (t as usize) < total && points.len() < cap {
        let idx = t as usize;
        points.push(if idx < a.nrows() {
            a.row(idx)
        } else {
            b.row(idx - a.nrows())
        });
        t += stride;
    }
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d: f64 = points[i]
                .iter()
                .zip(points[j].iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let m = dists[dists.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Default bandwidth set: median heuristic × {0.5, 1, 2}.
pub fn default_bandwidths(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Vec<f64> {
    let m = median_heuristic(a, b);
    vec![0.5 * m, m, 2.0 * m]
}

fn kernel(sq_dist: f64, bandwidths: &[f64]) -> f64 {
    let mut k = 0.0;
    for h in bandwidths {
        k += (-sq_dist / (2.0 * h * h)).exp();
    }
    k / bandwidths.len() as f64
}

fn sq_dist(x: ndarray::ArrayView1<'_, f64>, y: ndarray::ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_two_sample(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Argument("two-sample statistic needs non-empty samples".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Unbiased multi-bandwidth Gaussian-kernel MMD² estimate (can be slightly
/// negative under the null).
pub fn mmd_unbiased(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    bandwidths: &[f64],
) -> Result<f64> {
    check_two_sample(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    if m < 2 || n < 2 {
        return Err(Error::Argument("unbiased MMD² needs ≥2 points per sample".into()));
    }
    let kaa: f64 = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..m {
                if i != j {
                    s += kernel(sq_dist(a.row(i), a.row(j)), bandwidths);
                }
            }
            s
        })
        .sum();
    let kbb: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if i != j {
                    s += kernel(sq_dist(b.row(i), b.row(j)), bandwidths);
                }
            }
            s
        })
        .sum();
    let kab: f64 = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                s += kernel(sq_dist(a.row(i), b.row(j)), bandwidths);
            }
            s
        })
        .sum();
    Ok(kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64 - 2.0 * kab / (m * n) as f64)
}

/// Biased (V-statistic) MMD²; always ≥ 0 and symmetric.
pub fn mmd_biased(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    bandwidths: &[f64],
) -> Result<f64> {
    check_two_sample(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            kaa += kernel(sq_dist(a.row(i), a.row(j)), bandwidths);
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            kbb += kernel(sq_dist(b.row(i), b.row(j)), bandwidths);
        }
    }
    let mut kab = 0.0;
    for i in 0..m {
        for j in 0..n {
            kab += kernel(sq_dist(a.row(i), b.row(j)), bandwidths);
        }
    }
    Ok((kaa / (m * m) as f64 + kbb / (n * n) as f64 - 2.0 * kab / (m * n) as f64).max(0.0))
}

/// Energy distance (Székely–Rizzo form): 2·E‖A−B‖ − E‖A−A'‖ − E‖B−B'‖.
pub fn energy_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_two_sample(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    let daa: f64 = (0..m)
        .into_par_iter()
        .map(|i| (0..m).map(|j| sq_dist(a.row(i), a.row(j)).sqrt()).sum::<f64>())
        .sum();
    let dbb: f64 = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| sq_dist(b.row(i), b.row(j)).sqrt()).sum::<f64>())
        .sum();
    let dab: f64 = (0..m)
        .into_par_iter()
        .map(|i| (0..n).map(|j| sq_dist(a.row(i), b.row(j)).sqrt()).sum::<f64>())
        .sum();
    Ok(2.0 * dab / (m * n) as f64 - daa / (m * m) as f64 - dbb / (n * n) as f64)
}

/// Draws from the permutation null of the unbiased MMD² between two pooled
/// samples (used to calibrate "indistinguishable from data").
pub fn mmd_permutation_null(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    bandwidths: &[f64],
    n_perms: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_two_sample(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    let total = m + n;
    // precompute the combined kernel matrix once (f32 keeps it compact),
    // then each permutation is pure index arithmetic
    let mut pooled = Array2::zeros((total, a.ncols()));
    pooled.slice_mut(ndarray::s![..m, ..]).assign(&a);
    pooled.slice_mut(ndarray::s![m.., ..]).assign(&b);
    let gram: Vec<f32> = (0..total)
        .into_par_iter()
        .flat_map_iter(|i| {
            let row: Vec<f32> = (0..total)
                .map(|j| kernel(sq_dist(pooled.row(i), pooled.row(j)), bandwidths) as f32)
                .collect();
            row
        })
        .collect();
    let seeds: Vec<ChaCha8Rng> = (0..n_perms).map(|_| fork(rng)).collect();
    let draws: Vec<f64> = seeds
        .into_par_iter()
        .map(|mut prng| {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..total).collect();
            idx.shuffle(&mut prng);
            let (ia, ib) = idx.split_at(m);
            let mut kaa = 0.0f64;
            for &i in ia {
                for &j in ia {
                    if i != j {
                        kaa += gram[i * total + j] as f64;
                    }
                }
            }
            let mut kbb = 0.0f64;
            for &i in ib {
                for &j in ib {
                    if i != j {
                        kbb += gram[i * total + j] as f64;
                    }
                }
            }
            let mut kab = 0.0f64;
            for &i in ia {
                for &j in ib {
                    kab += gram[i * total + j] as f64;
                }
            }
            kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64 - 2.0 * kab / (m * n) as f64
        })
        .collect();
    Ok(draws)
}

/// Upper percentile (e.g. 0.99) of a sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[idx.min(v.len() - 1)]
}

// ── ranking ─────────────────────────────────────────────────────────────

/// Probability that a random OOD score exceeds a random in-distribution
/// score, ties counted ½ (Mann–Whitney U / n_in·n_out).
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::Argument("auroc needs non-empty score lists".into()));
    }
    // rank-based O((m+n) log(m+n)) with average ranks for ties
    let m = scores_in.len();
    let n = scores_out.len();
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|s| (*s, false))
        .chain(scores_out.iter().map(|s| (*s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_out = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // average rank of the tie group (1-based ranks)
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_out += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_out - (n * (n + 1)) as f64 / 2.0;
    Ok(u / (m as f64 * n as f64))
}

// ── latent aggregation and conditional sampling ─────────────────────────

/// z̄ = Σ zᵢ / ‖Σ zᵢ‖.
pub fn aggregate_latents<F: Real>(latents: &[UnitLatent<F>]) -> Result<UnitLatent<F>> {
    if latents.is_empty() {
        return Err(Error::Argument("aggregate_latents needs ≥1 latent".into()));
    }
    let sum = concept_sum(latents);
    let norm = sum.dot(&sum).sqrt().as_f64();
    if norm <= 1e-9 {
        return Err(Error::DegenerateAggregate { norm });
    }
    UnitLatent::from_unnormalized(sum)
}

/// SGLD on x ↦ E(x, z) from fresh uniform starts.
pub fn conditional_sample<F: Real>(
    model: &EnergyModel<F>,
    z: &UnitLatent<F>,
    cfg: &SgldConfig,
    init: &UniformInit,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<F>> {
    compositional_sample(model, std::slice::from_ref(z), cfg, init, n, rng)
}

/// SGLD on the compositional energy; with one concept this is bit-identical
/// to [`conditional_sample`] (same code path, same draws).
pub fn compositional_sample<F: Real>(
    model: &EnergyModel<F>,
    concepts: &[UnitLatent<F>],
    cfg: &SgldConfig,
    init: &UniformInit,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<F>> {
    if concepts.is_empty() {
        return Err(Error::Argument("compositional sampling needs ≥1 concept".into()));
    }
    let mut starts = Array2::zeros((n, init.dim));
    for i in 0..n {
        starts.row_mut(i).assign(&init.draw::<F>(rng));
    }
    let rngs: Vec<ChaCha8Rng> = (0..n).map(|_| fork(rng)).collect();
    let src = ConditionalEnergy {
        model,
        cond: concept_sum(concepts),
    };
    run_chains_parallel(&src, starts, cfg, None, rngs)
}

/// Nearest-center classification of samples against known mode centers.
pub fn nearest_mode_fractions(samples: ArrayView2<'_, f64>, centers: &[[f64; 2]]) -> Vec<f64> {
    let mut counts = vec![0usize; centers.len()];
    for row in samples.rows() {
        let (mut best, mut bd) = (0usize, f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let d = (row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2);
            if d < bd {
                bd = d;
                best = k;
            }
        }
        counts[best] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / samples.nrows() as f64)
        .collect()
}

// ── cosine-similarity histogram ─────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Histogram {
    /// n_bins + 1 edges spanning [−1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let total = self.total() as f64;
        let mut mean = 0.0;
        for (i, c) in self.counts.iter().enumerate() {
            let mid = (self.edges[i] + self.edges[i + 1]) / 2.0;
            mean += mid * (*c as f64) / total;
        }
        let mut var = 0.0;
        for (i, c) in self.counts.iter().enumerate() {
            let mid = (self.edges[i] + self.edges[i + 1]) / 2.0;
            var += (mid - mean).powi(2) * (*c as f64) / total;
        }
        (mean, var.sqrt())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut s = String::from("bin_edge,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{}\n", self.edges[i], c));
        }
        s.push_str(&format!("{},0\n", self.edges[self.edges.len() - 1]));
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Pairwise-cosine-similarity histogram over fixed bins on [−1, 1].
/// All unordered pairs when there are ≤ `max_pairs`, otherwise a seeded
/// uniform subsample of `max_pairs` pairs.
pub fn cosine_histogram<F: Real>(
    vectors: ArrayView2<'_, F>,
    n_bins: usize,
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Histogram> {
    let n = vectors.nrows();
    if n < 2 {
        return Err(Error::Argument("cosine histogram needs ≥2 vectors".into()));
    }
    let owned = vectors.to_owned();
    let (unit, _) = unit_rows(&owned)?;
    let mut edges = Vec::with_capacity(n_bins + 1);
    for i in 0..=n_bins {
        edges.push(-1.0 + 2.0 * i as f64 / n_bins as f64);
    }
    let mut counts = vec![0u64; n_bins];
    let total_pairs = n * (n - 1) / 2;
    let mut tally = |cos: f64| {
        let clamped = cos.clamp(-1.0, 1.0);
        let mut bin = ((clamped + 1.0) / 2.0 * n_bins as f64).floor() as usize;
        if bin >= n_bins {
            bin = n_bins - 1;
        }
        counts[bin] += 1;
    };
    if total_pairs <= max_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                tally(unit.row(i).dot(&unit.row(j)).as_f64());
            }
        }
    } else {
        for _ in 0..max_pairs {
            let i = rng.random_range(0..n);
            let j = loop {
                let j = rng.random_range(0..n);
                if j != i {
                    break j;
                }
            };
            tally(unit.row(i).dot(&unit.row(j)).as_f64());
        }
    }
    Ok(Histogram { edges, counts })
}

// ── norm-flexibility construction ───────────────────────────────────────

#[derive(Clone, Debug)]
pub struct FlexReport {
    pub max_discrepancy: f64,
    pub pass: bool,
    pub grid_size: usize,
    pub dim: usize,
}

/// Check that any scalar energy f1 on a grid is reproduced by a norm-based
/// energy: with b = min f1 and f2(x) = (√(f1(x) − b), 0, …, 0) ∈ ℝ^d, the
/// normalized densities exp(−(f1 − b)) and exp(−‖f2‖²) agree pointwise.
pub fn flexibility_check(f1: &[f64], d: usize, tolerance: f64) -> Result<FlexReport> {
    if f1.is_empty() || d == 0 {
        return Err(Error::Argument("flexibility_check needs a grid and d ≥ 1".into()));
    }
    if f1.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("grid energies must be finite".into()));
    }
    let b = f1.iter().cloned().fold(f64::INFINITY, f64::min);
    // build f2 explicitly and evaluate its norm-based density
    let p1: Vec<f64> = f1.iter().map(|v| (-(v - b)).exp()).collect();
    let p2: Vec<f64> = f1
        .iter()
        .map(|v| {
            let mut f2 = vec![0.0f64; d];
            f2[0] = (v - b).sqrt();
            let norm_sq: f64 = f2.iter().map(|c| c * c).sum();
            (-norm_sq).exp()
        })
        .collect();
    let z1: f64 = p1.iter().sum();
    let z2: f64 = p2.iter().sum();
    let max_discrepancy = p1
        .iter()
        .zip(p2.iter())
        .map(|(a, c)| (a / z1 - c / z2).abs())
        .fold(0.0, f64::max);
    Ok(FlexReport {
        max_discrepancy,
        pass: max_discrepancy < tolerance,
        grid_size: f1.len(),
        dim: d,
    })
}

// ── OOD evaluation ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct OodReport {
    pub auroc_joint: f64,
    pub auroc_marginal: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// AUROC of the joint OOD score and of the marginal-only baseline over the
/// same sets.
pub fn ood_eval<F: Real>(
    model: &EnergyModel<F>,
    encoder: &crate::encoder::Encoder<F>,
    in_set: &Array2<F>,
    out_set: &Array2<F>,
) -> Result<OodReport> {
    if in_set.nrows() == 0 || out_set.nrows() == 0 {
        return Err(Error::Argument("ood_eval needs non-empty sets".into()));
    }
    let joint_in = model.ood_score_batch(encoder, in_set)?;
    let joint_out = model.ood_score_batch(encoder, out_set)?;
    let marg_in: Vec<f64> = model
        .marginal_energy_batch(in_set)?
        .iter()
        .map(|e| e.as_f64())
        .collect();
    let marg_out: Vec<f64> = model
        .marginal_energy_batch(out_set)?
        .iter()
        .map(|e| e.as_f64())
        .collect();
    Ok(OodReport {
        auroc_joint: auroc(&joint_in, &joint_out)?,
        auroc_marginal: auroc(&marg_in, &marg_out)?,
        n_in: in_set.nrows(),
        n_out: out_set.nrows(),
    })
}

/// Convert a sample matrix to f64 for the two-sample statistics.
pub fn to_f64<F: Real>(x: &Array2<F>) -> Array2<f64> {
    x.mapv(|v| v.as_f64())
}

/// Row means (diagnostic helper).
pub fn column_means(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("nonempty")
}
