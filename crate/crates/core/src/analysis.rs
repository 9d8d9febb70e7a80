//! Latent-space study: encode every observable string, label each point
//! by where its Z observables sit and, for pure-X/Y strings, by the Y
//! count mod 4, then visualize with exact t-SNE and score the cluster
//! structure with nearest-neighbor label agreement against shuffled
//! baselines.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::model::{self, ModelParams};
use crate::qsim::{ObservableString, Pauli};
use crate::rng::Stream;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("perplexity {perplexity} infeasible for {points} points (must be < points/3)")]
    BadPerplexity { perplexity: f64, points: usize },
    #[error("invalid embedding config: {0}")]
    BadConfig(String),
    #[error("latent width {width} too large to enumerate (limit {limit})")]
    TooWide { width: usize, limit: usize },
    #[error("points have inconsistent vector lengths")]
    RaggedVectors,
}

/// Enumeration bound: 3^6 = 729 encodings.
pub const MAX_LATENT_QUBITS: usize = 6;

/// One observable string's latent encoding with its structure labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint {
    pub x: ObservableString,
    /// flattened posterior mean, length N * d
    pub vector: Vec<f64>,
    /// bit i set iff position i measures Z
    pub z_mask: u32,
    /// Y count mod 4, defined only for pure-X/Y strings
    pub n_y_mod4: Option<u8>,
}

/// Encode all 3^N observable strings, in lexicographic order.
pub fn extract_latents(params: &ModelParams) -> Result<Vec<LatentPoint>, AnalysisError> {
    let n = params.hyperparams().num_qubits;
    if n > MAX_LATENT_QUBITS {
        return Err(AnalysisError::TooWide {
            width: n,
            limit: MAX_LATENT_QUBITS,
        });
    }
    let mut out = Vec::new();
    for x in ObservableString::enumerate(n) {
        let dist = model::encode(params, &x)?;
        let mut z_mask = 0u32;
        let mut pure_xy = true;
        let mut n_y = 0u8;
        for (i, p) in x.0.iter().enumerate() {
            match p {
                Pauli::Z => {
                    z_mask |= 1 << i;
                    pure_xy = false;
                }
                Pauli::Y => n_y += 1,
                Pauli::X => {}
            }
        }
        out.push(LatentPoint {
            vector: dist.mu.data().to_vec(),
            z_mask,
            n_y_mod4: if pure_xy { Some(n_y % 4) } else { None },
            x,
        });
    }
    Ok(out)
}

/// Exact t-SNE settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmbedConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// gradient step size; `None` picks max(points / 48, 50), which
    /// stays stable on small point sets where a large fixed rate
    /// oscillates
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_start: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl EmbedConfig {
    pub fn defaults(seed: u64) -> EmbedConfig {
        EmbedConfig {
            perplexity: 30.0,
            iterations: 1_000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_start: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed,
        }
    }
}

/// Embedding plus the optimizer trace of the plain (un-exaggerated) KL
/// objective, one entry per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coordinates: Vec<[f64; 2]>,
    pub kl_trace: Vec<f64>,
}

const AFFINITY_FLOOR: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-5;

/// Per-point conditional affinities with the bandwidth binary-searched
/// so the conditional entropy matches ln(perplexity) within 1e-5.
fn conditional_affinities(sq_dist: &[f64], n: usize, i: usize, target_entropy: f64) -> Vec<f64> {
    let mut beta = 1.0f64;
    let mut beta_lo = f64::NEG_INFINITY;
    let mut beta_hi = f64::INFINITY;
    let mut probs = vec![0.0; n];
    for _ in 0..200 {
        let mut sum = 0.0;
        for j in 0..n {
            probs[j] = if j == i {
                0.0
            } else {
                math::exp(-beta * sq_dist[i * n + j])
            };
            sum += probs[j];
        }
        if sum <= 0.0 {
            // all neighbors at numerically infinite distance; fall back
            // to uniform
            let u = 1.0 / (n - 1) as f64;
            for (j, p) in probs.iter_mut().enumerate() {
                *p = if j == i { 0.0 } else { u };
            }
            return probs;
        }
        let mut entropy = 0.0;
        for j in 0..n {
            if probs[j] > 0.0 {
                let p = probs[j] / sum;
                probs[j] = p;
                entropy -= p * math::ln(p);
            }
        }
        let diff = entropy - target_entropy;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            beta_lo = beta;
            beta = if beta_hi.is_finite() {
                0.5 * (beta + beta_hi)
            } else {
                beta * 2.0
            };
        } else {
            beta_hi = beta;
            beta = if beta_lo.is_finite() {
                0.5 * (beta + beta_lo)
            } else {
                beta * 0.5
            };
        }
    }
    probs
}

/// Exact (all-pairs) t-SNE to 2 dimensions.
pub fn tsne(points: &[Vec<f64>], config: &EmbedConfig) -> Result<Embedding, AnalysisError> {
    let n = points.len();
    if n < 4 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    if !points.iter().all(|p| p.len() == points[0].len()) {
        return Err(AnalysisError::RaggedVectors);
    }
    if !(config.perplexity > 0.0) || config.perplexity >= n as f64 / 3.0 {
        return Err(AnalysisError::BadPerplexity {
            perplexity: config.perplexity,
            points: n,
        });
    }
    if config.iterations == 0 || config.learning_rate.is_some_and(|lr| lr <= 0.0) {
        return Err(AnalysisError::BadConfig(
            "iterations and learning_rate must be positive".into(),
        ));
    }
    let learning_rate = config
        .learning_rate
        .unwrap_or_else(|| (n as f64 / (config.early_exaggeration * 4.0)).max(50.0));
    let mut sq_dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq_dist[i * n + j] = d;
            sq_dist[j * n + i] = d;
        }
    }
    let target_entropy = math::ln(config.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let cond = conditional_affinities(&sq_dist, n, i, target_entropy);
        for j in 0..n {
            p[i * n + j] = cond[j];
        }
    }
    // symmetrize and normalize to a joint distribution
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (p[i * n + j] + p[j * n + i]) / (2.0 * n as f64);
            let v = v.max(AFFINITY_FLOOR);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
        p[i * n + i] = 0.0;
    }

    let mut rng = Stream::derive(config.seed, &[0x7357]);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-2 * rng.normal(), 1e-2 * rng.normal()])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut q = vec![0.0; n * n];
    let mut kl_trace = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch_iter {
            config.momentum_start
        } else {
            config.momentum_final
        };
        if iter == config.exaggeration_iters {
            // the objective changes here; restart the optimizer from
            // rest so stale momentum cannot climb the new landscape
            velocity.iter_mut().for_each(|v| *v = [0.0; 2]);
            gains.iter_mut().for_each(|g| *g = [1.0; 2]);
        }
        // student-t kernel
        let mut z_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                z_sum += 2.0 * w;
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let pij = p[i * n + j];
                    let qij = (q[i * n + j] / z_sum).max(AFFINITY_FLOOR);
                    kl += pij * math::ln(pij / qij);
                }
            }
        }
        kl_trace.push(kl);
        // gradient, with the attractive term scaled by the exaggeration
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff =
                    4.0 * (exaggeration * p[i * n + j] - q[i * n + j] / z_sum) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                if grad[k].signum() != velocity[i][k].signum() {
                    gains[i][k] += 0.2;
                } else {
                    gains[i][k] *= 0.8;
                }
                gains[i][k] = gains[i][k].max(0.01);
                velocity[i][k] =
                    momentum * velocity[i][k] - learning_rate * gains[i][k] * grad[k];
            }
        }
        let mut mean = [0.0f64; 2];
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
            mean[0] += y[i][0];
            mean[1] += y[i][1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for yi in y.iter_mut() {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    Ok(Embedding {
        coordinates: y,
        kl_trace,
    })
}

/// A nearest-neighbor agreement score with its shuffled-label baseline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterScore {
    pub score: f64,
    pub baseline_mean: f64,
    /// 99th percentile of 1000 label-shuffle scores
    pub baseline_p99: f64,
    pub exceeds_p99: bool,
    pub point_count: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterScores {
    pub z_mask: ClusterScore,
    pub n_y_mod4: ClusterScore,
}

const SHUFFLES: usize = 1_000;
const P99_INDEX: usize = 989;

/// 1-nearest-neighbor index (Euclidean, self excluded) for each point.
fn nearest_neighbors(vectors: &[&[f64]]) -> Vec<usize> {
    let n = vectors.len();
    let mut out = vec![0usize; n];
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d: f64 = vectors[i]
                .iter()
                .zip(vectors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best {
                best = d;
                best_j = j;
            }
        }
        out[i] = best_j;
    }
    out
}

fn agreement(neighbors: &[usize], labels: &[u32]) -> f64 {
    let hits = neighbors
        .iter()
        .enumerate()
        .filter(|(i, &j)| labels[*i] == labels[j])
        .count();
    hits as f64 / neighbors.len() as f64
}

fn scored_with_baseline(vectors: &[&[f64]], labels: &[u32], rng: &mut Stream) -> ClusterScore {
    let neighbors = nearest_neighbors(vectors);
    let score = agreement(&neighbors, labels);
    let mut shuffled = labels.to_vec();
    let mut baseline = Vec::with_capacity(SHUFFLES);
    for _ in 0..SHUFFLES {
        // Fisher-Yates
        for i in (1..shuffled.len()).rev() {
            let j = rng.below(i + 1);
            shuffled.swap(i, j);
        }
        baseline.push(agreement(&neighbors, &shuffled));
    }
    let baseline_mean = baseline.iter().sum::<f64>() / SHUFFLES as f64;
    baseline.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let baseline_p99 = baseline[P99_INDEX];
    ClusterScore {
        score,
        baseline_mean,
        baseline_p99,
        exceeds_p99: score > baseline_p99,
        point_count: vectors.len(),
    }
}

/// Score both labelings in the full latent space. The n_Y score uses
/// only pure-X/Y points.
pub fn cluster_scores(points: &[LatentPoint], seed: u64) -> Result<ClusterScores, AnalysisError> {
    if points.len() < 4 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    if !points.iter().all(|p| p.vector.len() == points[0].vector.len()) {
        return Err(AnalysisError::RaggedVectors);
    }
    let mut rng = Stream::derive(seed, &[0xba5e]);
    let all_vectors: Vec<&[f64]> = points.iter().map(|p| p.vector.as_slice()).collect();
    let z_labels: Vec<u32> = points.iter().map(|p| p.z_mask).collect();
    let z_mask = scored_with_baseline(&all_vectors, &z_labels, &mut rng);
    let xy: Vec<&LatentPoint> = points.iter().filter(|p| p.n_y_mod4.is_some()).collect();
    if xy.len() < 4 {
        return Err(AnalysisError::TooFewPoints(xy.len()));
    }
    let xy_vectors: Vec<&[f64]> = xy.iter().map(|p| p.vector.as_slice()).collect();
    let xy_labels: Vec<u32> = xy.iter().map(|p| u32::from(p.n_y_mod4.unwrap())).collect();
    let n_y_mod4 = scored_with_baseline(&xy_vectors, &xy_labels, &mut rng);
    Ok(ClusterScores { z_mask, n_y_mod4 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Hyperparams;

    fn tiny_params() -> ModelParams {
        let hp = Hyperparams {
            num_qubits: 2,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            beta: 0.5,
        };
        let mut rng = Stream::new(3);
        ModelParams::init(hp, &mut rng).unwrap()
    }

    #[test]
    fn latents_enumerate_all_strings_with_labels() {
        let params = tiny_params();
        let points = extract_latents(&params).unwrap();
        assert_eq!(points.len(), 9);
        assert_eq!(points.iter().filter(|p| p.n_y_mod4.is_some()).count(), 4);
        for p in &points {
            assert_eq!(p.vector.len(), 2 * 8);
            assert!(p.vector.iter().all(|v| v.is_finite()));
            for (i, pauli) in p.x.0.iter().enumerate() {
                assert_eq!(p.z_mask >> i & 1 == 1, *pauli == Pauli::Z);
            }
            if let Some(m) = p.n_y_mod4 {
                let ny = p.x.0.iter().filter(|q| **q == Pauli::Y).count();
                assert_eq!(m as usize, ny % 4);
                assert!(p.x.0.iter().all(|q| *q != Pauli::Z));
            }
        }
    }

    fn three_gaussians(seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = Stream::new(seed);
        let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..20 {
                points.push(c.iter().map(|&m| m + rng.normal()).collect());
                labels.push(label as u32);
            }
        }
        (points, labels)
    }

    #[test]
    fn tsne_separates_well_separated_gaussians() {
        let (points, labels) = three_gaussians(6);
        let mut cfg = EmbedConfig::defaults(6);
        cfg.perplexity = 10.0;
        let emb = tsne(&points, &cfg).unwrap();
        assert_eq!(emb.coordinates.len(), 60);
        let coords: Vec<Vec<f64>> = emb.coordinates.iter().map(|c| c.to_vec()).collect();
        let refs: Vec<&[f64]> = coords.iter().map(|c| c.as_slice()).collect();
        let neighbors = nearest_neighbors(&refs);
        let purity = agreement(&neighbors, &labels);
        assert!(purity >= 0.95, "purity {purity}");
    }

    #[test]
    fn kl_trace_is_mostly_non_increasing_after_exaggeration() {
        let (points, _) = three_gaussians(8);
        let mut cfg = EmbedConfig::defaults(8);
        cfg.perplexity = 10.0;
        let emb = tsne(&points, &cfg).unwrap();
        let tail = &emb.kl_trace[cfg.exaggeration_iters..];
        let ok = tail
            .windows(2)
            .filter(|w| w[1] <= w[0] + 1e-9)
            .count();
        let frac = ok as f64 / (tail.len() - 1) as f64;
        assert!(frac >= 0.95, "non-increasing fraction {frac}");
        assert!(emb.kl_trace.iter().all(|k| k.is_finite()));
    }

    #[test]
    fn tsne_is_deterministic_in_the_seed() {
        let (points, _) = three_gaussians(4);
        let mut cfg = EmbedConfig::defaults(4);
        cfg.perplexity = 8.0;
        cfg.iterations = 60;
        let a = tsne(&points, &cfg).unwrap();
        let b = tsne(&points, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_perplexity_is_rejected() {
        let points: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64, 0.0]).collect();
        let mut cfg = EmbedConfig::defaults(1);
        cfg.perplexity = 3.0;
        assert!(matches!(
            tsne(&points, &cfg),
            Err(AnalysisError::BadPerplexity { .. })
        ));
        assert!(matches!(
            tsne(&points[..3], &EmbedConfig::defaults(1)),
            Err(AnalysisError::TooFewPoints(3))
        ));
    }

    #[test]
    fn perfect_label_geometry_scores_one() {
        // hand-built points: same-label pairs coincide, labels far apart
        let x = ObservableString::parse("XX").unwrap();
        let mut points = Vec::new();
        for label in 0..4u32 {
            for copy in 0..2 {
                let key = label as f64 * 50.0 + copy as f64 * 0.1;
                points.push(LatentPoint {
                    x: x.clone(),
                    vector: vec![key, -key],
                    z_mask: label,
                    n_y_mod4: Some(label as u8),
                });
            }
        }
        let scores = cluster_scores(&points, 2).unwrap();
        assert_eq!(scores.z_mask.score, 1.0);
        assert_eq!(scores.n_y_mod4.score, 1.0);
        assert!(scores.z_mask.exceeds_p99);
        assert!(scores.n_y_mod4.exceeds_p99);
    }

    #[test]
    fn scores_are_invariant_under_rotation_and_scaling() {
        let params = tiny_params();
        let points = extract_latents(&params).unwrap();
        let base = cluster_scores(&points, 5).unwrap();
        let (c, s) = (math::cos(0.7), math::sin(0.7));
        let rotated: Vec<LatentPoint> = points
            .iter()
            .map(|p| {
                let mut v = p.vector.clone();
                // rotate each consecutive coordinate pair, then scale
                for pair in v.chunks_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = 3.0 * (c * a - s * b);
                    pair[1] = 3.0 * (s * a + c * b);
                }
                LatentPoint {
                    vector: v,
                    ..p.clone()
                }
            })
            .collect();
        let turned = cluster_scores(&rotated, 5).unwrap();
        assert_eq!(base.z_mask.score, turned.z_mask.score);
        assert_eq!(base.n_y_mod4.score, turned.n_y_mod4.score);
    }
}
