//! Exact O(N^2) t-SNE: perplexity-calibrated Gaussian affinities in the
//! input space, Student-t affinities in 2-D, KL-divergence gradient
//! descent with momentum, adaptive gains and early exaggeration.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::knn::{Bandwidth, KernelParams, KnnIndex, Metric};

/// Optimizer and affinity parameters; defaults follow common practice.
#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: usize,
    pub eta: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            eta: 200.0,
            init_scale: 1e-2,
            seed: 0,
        }
    }
}

impl TsneConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if n < 4 {
            return Err(Error::Data(format!("t-SNE needs at least 4 points, got {n}")));
        }
        if self.perplexity <= 0.0 || self.perplexity > (n as f64 - 1.0) / 3.0 {
            return Err(Error::Config(format!(
                "perplexity must be in (0, (N-1)/3] = (0, {:.3}], got {}",
                (n as f64 - 1.0) / 3.0,
                self.perplexity
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config(format!("step size must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Row-normalized conditional neighbor distribution plus the bandwidths
/// found by the perplexity search.
#[derive(Debug, Clone)]
pub struct ConditionalAffinities {
    pub n: usize,
    /// N x N row-major; diagonal zero, rows sum to 1.
    pub p: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub achieved_perplexity: Vec<f64>,
    /// Rows where the bisection hit its boundary without matching the
    /// target (symmetric inputs can make the target unreachable).
    pub converged: Vec<bool>,
}

/// Symmetrized joint distribution: entries >= 0, zero diagonal, sum 1.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub n: usize,
    pub p: Vec<f64>,
}

/// 2-D embedding plus the KL trace of the optimization.
#[derive(Debug, Clone)]
pub struct EmbeddingLayout {
    pub points: Vec<[f64; 2]>,
    pub final_kl: f64,
    /// (iteration, KL against the unexaggerated P), every 50 iterations.
    pub trace: Vec<(usize, f64)>,
}

/// Pairwise squared distances via the expanded-norm identity, clamped at
/// zero to kill negative round-off.
fn squared_distances(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let norms: Vec<f64> = (0..n)
        .map(|i| x[i * d..(i + 1) * d].iter().map(|v| v * v).sum())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut dot = 0.0;
            let xi = &x[i * d..(i + 1) * d];
            let xj = &x[j * d..(j + 1) * d];
            for (a, b) in xi.iter().zip(xj) {
                dot += a * b;
            }
            let dist = (norms[i] + norms[j] - 2.0 * dot).max(0.0);
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    out
}

/// Gaussian conditional affinities with per-point bandwidths calibrated so
/// every row's effective neighborhood size `2^H` matches the target
/// perplexity within 1e-4 (bisection on log sigma, at most 64 steps).
pub fn conditional_affinities(
    x: &[f64],
    n: usize,
    d: usize,
    perplexity: f64,
) -> Result<ConditionalAffinities> {
    if n < 4 {
        return Err(Error::Data(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if x.len() != n * d {
        return Err(Error::Dimension {
            what: "t-sne input".into(),
            expected: n * d,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-SNE input contains non-finite values".into()));
    }
    if perplexity <= 0.0 || perplexity > (n as f64 - 1.0) / 3.0 {
        return Err(Error::Config(format!(
            "perplexity must be in (0, {:.3}], got {perplexity}",
            (n as f64 - 1.0) / 3.0
        )));
    }

    let d2 = squared_distances(x, n, d);
    let mut p = vec![0.0; n * n];
    let mut sigmas = vec![0.0; n];
    let mut achieved = vec![0.0; n];
    let mut converged = vec![false; n];

    let mut row_buf = vec![0.0; n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let shift = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);

        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut ln_sigma = 0.0f64;
        let mut perp_here = 0.0;
        for _ in 0..64 {
            let sigma = ln_sigma.exp();
            let denom = 2.0 * sigma * sigma;
            let mut sum = 0.0;
            for j in 0..n {
                row_buf[j] = if j == i {
                    0.0
                } else {
                    let w = (-(row[j] - shift) / denom).exp();
                    sum += w;
                    w
                };
            }
            let mut entropy_bits = 0.0;
            for j in 0..n {
                if j != i && row_buf[j] > 0.0 {
                    let pj = row_buf[j] / sum;
                    entropy_bits -= pj * pj.log2();
                }
            }
            perp_here = entropy_bits.exp2();
            if (perp_here - perplexity).abs() < 1e-4 {
                converged[i] = true;
                break;
            }
            if perp_here > perplexity {
                hi = ln_sigma;
                ln_sigma = if lo.is_finite() { 0.5 * (lo + ln_sigma) } else { ln_sigma - 1.0 };
            } else {
                lo = ln_sigma;
                ln_sigma = if hi.is_finite() { 0.5 * (hi + ln_sigma) } else { ln_sigma + 1.0 };
            }
        }
        let sigma = ln_sigma.exp();
        let denom = 2.0 * sigma * sigma;
        let mut sum = 0.0;
        for j in 0..n {
            row_buf[j] = if j == i {
                0.0
            } else {
                let w = (-(row[j] - shift) / denom).exp();
                sum += w;
                w
            };
        }
        for j in 0..n {
            p[i * n + j] = if j == i { 0.0 } else { row_buf[j] / sum };
        }
        sigmas[i] = sigma;
        achieved[i] = perp_here;
    }

    Ok(ConditionalAffinities {
        n,
        p,
        sigmas,
        achieved_perplexity: achieved,
        converged,
    })
}

/// Joint distribution `p_ij = (p_(j|i) + p_(i|j)) / (2N)`.
pub fn symmetrize(conditional: &ConditionalAffinities) -> AffinityMatrix {
    let n = conditional.n;
    let mut p = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (conditional.p[i * n + j] + conditional.p[j * n + i]) * scale;
            }
        }
    }
    AffinityMatrix { n, p }
}

/// Student-t kernel weights `w_ij = 1/(1 + |y_i - y_j|^2)` and their sum.
fn student_weights(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = v;
            w[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (w, z)
}

/// Normalized low-dimensional affinities Q and the normalizer Z.
pub fn low_dim_affinities(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let (mut w, z) = student_weights(y);
    for v in &mut w {
        *v /= z;
    }
    (w, z)
}

/// KL(P || Q) over off-diagonal entries (0 log 0 = 0) and its gradient
/// `4 sum_j (p_ij - q_ij) w_ij (y_i - y_j)`.
pub fn kl_and_gradient(p: &AffinityMatrix, y: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
    let n = p.n;
    let (w, z) = student_weights(y);
    let mut kl = 0.0;
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p.p[i * n + j];
            let qij = w[i * n + j] / z;
            if pij > 0.0 {
                kl += pij * (pij / qij).ln();
            }
            let mult = 4.0 * (pij - qij) * w[i * n + j];
            grad[i][0] += mult * (y[i][0] - y[j][0]);
            grad[i][1] += mult * (y[i][1] - y[j][1]);
        }
    }
    (kl, grad)
}

fn kl_only(p: &AffinityMatrix, y: &[[f64; 2]]) -> f64 {
    let n = p.n;
    let (w, z) = student_weights(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && p.p[i * n + j] > 0.0 {
                kl += p.p[i * n + j] * (p.p[i * n + j] / (w[i * n + j] / z)).ln();
            }
        }
    }
    kl
}

/// Run the full optimization; deterministic given `config.seed`.
///
/// P is multiplied by the exaggeration factor for the exaggeration phase;
/// velocity uses the initial momentum before the switch step and the final
/// momentum after; per-coordinate gains adapt (x0.8 on sign agreement with
/// the velocity, +0.2 otherwise, floor 0.01); the layout is recentered to
/// zero mean every iteration. The KL trace is recorded against the
/// unexaggerated P every 50 iterations.
pub fn run_tsne(x: &[f64], n: usize, d: usize, config: &TsneConfig) -> Result<EmbeddingLayout> {
    config.validate(n)?;
    let conditional = conditional_affinities(x, n, d, config.perplexity)?;
    let p_true = symmetrize(&conditional);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_scale)
        .map_err(|e| Error::Config(format!("bad init scale: {e}")))?;
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();

    let exaggerated = AffinityMatrix {
        n,
        p: p_true.p.iter().map(|v| v * config.exaggeration).collect(),
    };

    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut trace = Vec::new();
    trace.push((0, kl_only(&p_true, &y)));

    for iter in 0..config.iterations {
        let p_now = if iter < config.exaggeration_iters {
            &exaggerated
        } else {
            &p_true
        };
        let momentum = if iter < config.momentum_switch {
            config.momentum_initial
        } else {
            config.momentum_final
        };

        let (kl_now, grad) = kl_and_gradient(p_now, &y);
        if !kl_now.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite KL at iteration {iter}; trace so far: {trace:?}"
            )));
        }

        for i in 0..n {
            for c in 0..2 {
                let g = grad[i][c];
                if (g > 0.0) == (velocity[i][c] > 0.0) {
                    gains[i][c] *= 0.8;
                } else {
                    gains[i][c] += 0.2;
                }
                if gains[i][c] < 0.01 {
                    gains[i][c] = 0.01;
                }
                velocity[i][c] = momentum * velocity[i][c] - config.eta * gains[i][c] * g;
                y[i][c] += velocity[i][c];
            }
        }

        let mean = y.iter().fold([0.0f64; 2], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for point in &mut y {
            point[0] -= mean[0];
            point[1] -= mean[1];
        }

        if (iter + 1) % 50 == 0 {
            trace.push((iter + 1, kl_only(&p_true, &y)));
        }
    }

    let final_kl = kl_only(&p_true, &y);
    Ok(EmbeddingLayout {
        points: y,
        final_kl,
        trace,
    })
}

/// Export a layout as CSV with header `index,x,y,label`; the label column
/// is empty when no labels are given.
pub fn export_layout_csv(
    layout: &EmbeddingLayout,
    labels: Option<&[u32]>,
    path: &Path,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != layout.points.len() {
            return Err(Error::Dimension {
                what: "layout labels".into(),
                expected: layout.points.len(),
                got: l.len(),
            });
        }
    }
    let mut out = String::from("index,x,y,label\n");
    for (i, point) in layout.points.iter().enumerate() {
        match labels {
            Some(l) => out.push_str(&format!("{i},{},{},{}\n", point[0], point[1], l[i])),
            None => out.push_str(&format!("{i},{},{},\n", point[0], point[1])),
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Leave-one-out k-NN label agreement of a 2-D layout: the fraction of
/// points whose k nearest layout neighbors vote for the point's own label
/// (uniform-weight limit of the Gaussian kernel).
pub fn layout_label_agreement(points: &[[f64; 2]], labels: &[u32], k: usize) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Dimension {
            what: "layout labels".into(),
            expected: points.len(),
            got: labels.len(),
        });
    }
    let mut vectors = Vec::with_capacity(points.len() * 2);
    for p in points {
        vectors.push(p[0]);
        vectors.push(p[1]);
    }
    let index = KnnIndex::new(vectors, 2, labels.to_vec(), Metric::Euclidean)?;
    crate::knn::leave_one_out_accuracy(&index, &KernelParams::new(k, Bandwidth::Fixed(1e9)))
}
