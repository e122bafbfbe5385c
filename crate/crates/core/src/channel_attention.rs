//! Squeeze-style channel attention: pool each channel over positions, pass
//! the pooled vector through a ReLU bottleneck and a sigmoid, and rescale
//! every channel of the input by its score.

use serde::Serialize;

use crate::attention::{channel_weight_report, linear_sa_forward_linear};
use crate::error::{invalid, Error, Result};
use crate::projections::{FeatureMap, ProjectionSet};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const DEFAULT_BOTTLENECK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct CAWeights {
    /// `C x C/rho`
    w1: Matrix,
    /// `C/rho x C`
    w2: Matrix,
    rho: usize,
}

impl CAWeights {
    pub fn new(w1: Matrix, w2: Matrix, rho: usize) -> Result<Self> {
        let c = w1.rows();
        if rho == 0 || !c.is_multiple_of(rho) {
            return Err(invalid(format!(
                "channels {c} not divisible by bottleneck {rho}"
            )));
        }
        let hidden = c / rho;
        if w1.cols() != hidden || w2.rows() != hidden || w2.cols() != c {
            return Err(Error::ShapeMismatch {
                op: "CAWeights::new",
                left: w1.shape(),
                right: w2.shape(),
            });
        }
        Ok(Self { w1, w2, rho })
    }

    /// Uniform `[-1/√C, 1/√C]` entries.
    pub fn random(c: usize, rho: usize, rng: &mut Rng) -> Result<Self> {
        if rho == 0 || c == 0 || !c.is_multiple_of(rho) {
            return Err(invalid(format!(
                "channels {c} not divisible by bottleneck {rho}"
            )));
        }
        let bound = 1.0 / (c as f64).sqrt();
        let w1 = Matrix::random_uniform(c, c / rho, bound, rng);
        let w2 = Matrix::random_uniform(c / rho, c, bound, rng);
        Self::new(w1, w2, rho)
    }

    pub fn zeros(c: usize, rho: usize) -> Result<Self> {
        if rho == 0 || c == 0 || !c.is_multiple_of(rho) {
            return Err(invalid(format!(
                "channels {c} not divisible by bottleneck {rho}"
            )));
        }
        Self::new(Matrix::zeros(c, c / rho), Matrix::zeros(c / rho, c), rho)
    }

    pub fn channels(&self) -> usize {
        self.w1.rows()
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn rho(&self) -> usize {
        self.rho
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Mean of every channel over all positions.
pub fn global_average_pool(x: &FeatureMap) -> Vec<f64> {
    let v = x.values();
    let mut m = vec![0.0; v.cols()];
    for i in 0..v.rows() {
        for (acc, val) in m.iter_mut().zip(v.row(i)) {
            *acc += val;
        }
    }
    let n = v.rows() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Intermediate values of one channel-attention pass.
#[derive(Debug, Clone)]
pub struct CaForward {
    pub pooled: Vec<f64>,
    /// Bottleneck pre-activation `m · w1`.
    pub hidden: Vec<f64>,
    pub scores: Vec<f64>,
    pub out: FeatureMap,
}

pub fn ca_forward_full(x: &FeatureMap, w: &CAWeights) -> Result<CaForward> {
    if x.n_channels() != w.channels() {
        return Err(Error::ShapeMismatch {
            op: "ca_forward",
            left: x.values().shape(),
            right: w.w1.shape(),
        });
    }
    let pooled = global_average_pool(x);
    let hidden = vec_mat(&pooled, &w.w1);
    let activated: Vec<f64> = hidden.iter().map(|&h| h.max(0.0)).collect();
    let scores: Vec<f64> = vec_mat(&activated, &w.w2)
        .into_iter()
        .map(sigmoid)
        .collect();
    let mut out = x.values().clone();
    for i in 0..out.rows() {
        for (o, s) in out.row_mut(i).iter_mut().zip(&scores) {
            *o *= s;
        }
    }
    Ok(CaForward {
        pooled,
        hidden,
        scores,
        out: FeatureMap::new(out),
    })
}

/// Returns the per-channel scores and the rescaled map.
pub fn ca_forward(x: &FeatureMap, w: &CAWeights) -> Result<(Vec<f64>, FeatureMap)> {
    let f = ca_forward_full(x, w)?;
    Ok((f.scores, f.out))
}

/// Row vector times matrix.
pub(crate) fn vec_mat(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (k, &a) in v.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(m.row(k)) {
            *o += a * b;
        }
    }
    out
}

/// Side-by-side behaviour of both channel mechanisms when the input is
/// scaled by `alpha`.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelComparison {
    pub alpha: f64,
    /// Linear self-attention channel weights at `x` and at `alpha·x`.
    pub sa_weights: Vec<Option<f64>>,
    pub sa_weights_scaled: Vec<Option<f64>>,
    /// Max relative deviation of `sa_weights_scaled` from `alpha² · sa_weights`.
    /// Query, key and value each scale by `alpha`, so the weights scale by
    /// `alpha²` and the output by `alpha³`.
    pub sa_weight_scaling_error: f64,
    /// Max relative deviation of `out(alpha·x)` from `alpha³ · out(x)`.
    pub sa_homogeneity_error: f64,
    pub ca_scores: Vec<f64>,
    pub ca_scores_scaled: Vec<f64>,
    /// `max |s(alpha·x) - s(x)|`; nonzero witnesses the sigmoid/ReLU nonlinearity.
    pub ca_score_shift: f64,
    /// Max relative deviation of `ca_out(alpha·x)` from `alpha · ca_out(x)`.
    pub ca_homogeneity_error: f64,
}

pub fn compare_channel_mechanisms(
    x: &FeatureMap,
    p_rank1: &ProjectionSet,
    w: &CAWeights,
    alpha: f64,
) -> Result<ChannelComparison> {
    let scaled = x.scaled(alpha);
    let sa = channel_weight_report(x, p_rank1)?;
    let sa_scaled = channel_weight_report(&scaled, p_rank1)?;
    let a2 = alpha * alpha;
    let sa_weight_scaling_error = sa
        .weights
        .iter()
        .zip(&sa_scaled.weights)
        .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
        .map(|(a, b)| (b - a2 * a).abs() / (a2 * a).abs().max(1e-300))
        .fold(0.0, f64::max);

    let out = linear_sa_forward_linear(x, p_rank1)?.output;
    let out_scaled = linear_sa_forward_linear(&scaled, p_rank1)?.output;
    let sa_homogeneity_error = out.scale(alpha.powi(3)).max_rel_diff(&out_scaled, 1e-300)?;

    let ca = ca_forward_full(x, w)?;
    let ca_scaled = ca_forward_full(&scaled, w)?;
    let ca_score_shift = ca
        .scores
        .iter()
        .zip(&ca_scaled.scores)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let ca_homogeneity_error = ca
        .out
        .values()
        .scale(alpha)
        .max_rel_diff(ca_scaled.out.values(), 1e-300)?;

    Ok(ChannelComparison {
        alpha,
        sa_weights: sa.weights,
        sa_weights_scaled: sa_scaled.weights,
        sa_weight_scaling_error,
        sa_homogeneity_error,
        ca_scores: ca.scores,
        ca_scores_scaled: ca_scaled.scores,
        ca_score_shift,
        ca_homogeneity_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projections::rank_one_projections;

    #[test]
    fn pool_of_constant_channel() {
        let x = FeatureMap::new(Matrix::filled(5, 3, 2.5));
        assert_eq!(global_average_pool(&x), vec![2.5; 3]);
        let x = FeatureMap::new(Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap());
        assert_eq!(global_average_pool(&x), vec![2.5]);
    }

    #[test]
    fn pool_matches_loop_oracle() {
        let mut rng = Rng::new(42);
        let x = FeatureMap::random(32, 8, &mut rng);
        let pooled = global_average_pool(&x);
        for (k, &m) in pooled.iter().enumerate() {
            let mean = x.values().column(k).iter().sum::<f64>() / 32.0;
            assert!((m - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_half_scores() {
        let w = CAWeights::random(16, 16, &mut Rng::new(1)).unwrap();
        let (s, out) = ca_forward(&FeatureMap::new(Matrix::zeros(4, 16)), &w).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
        assert_eq!(out.values().max_abs(), 0.0);
    }

    #[test]
    fn zero_weights_halve_input() {
        let mut rng = Rng::new(2);
        let x = FeatureMap::random(6, 32, &mut rng);
        let w = CAWeights::zeros(32, 16).unwrap();
        let (s, out) = ca_forward(&x, &w).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
        assert_eq!(out.values(), &x.values().scale(0.5));
    }

    #[test]
    fn seeded_forward_matches_loop_oracle() {
        let mut rng = Rng::new(42);
        let x = FeatureMap::random(10, 16, &mut rng);
        let w = CAWeights::random(16, 4, &mut rng).unwrap();
        let (s, out) = ca_forward(&x, &w).unwrap();
        let (n, c, h) = (10, 16, 4);
        let mut m = vec![0.0; c];
        for k in 0..c {
            for i in 0..n {
                m[k] += x.values().get(i, k);
            }
            m[k] /= n as f64;
        }
        let mut hid = vec![0.0; h];
        for j in 0..h {
            for k in 0..c {
                hid[j] += m[k] * w.w1().get(k, j);
            }
            hid[j] = hid[j].max(0.0);
        }
        for k in 0..c {
            let mut pre = 0.0;
            for j in 0..h {
                pre += hid[j] * w.w2().get(j, k);
            }
            let sk = 1.0 / (1.0 + (-pre).exp());
            assert!((s[k] - sk).abs() <= 1e-10);
            for i in 0..n {
                assert!((out.values().get(i, k) - sk * x.values().get(i, k)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn scores_stay_in_open_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let x = FeatureMap::random(8, 16, &mut rng);
            let w = CAWeights::random(16, 4, &mut rng).unwrap();
            let (s, _) = ca_forward(&x, &w).unwrap();
            assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(CAWeights::random(12, 8, &mut Rng::new(0)).is_err());
        let w = CAWeights::random(16, 4, &mut Rng::new(0)).unwrap();
        assert!(ca_forward(&FeatureMap::new(Matrix::zeros(2, 8)), &w).is_err());
        assert!(CAWeights::new(Matrix::zeros(4, 2), Matrix::zeros(2, 3), 2).is_err());
    }

    fn comparison_fixture(seed: u64) -> (FeatureMap, ProjectionSet, CAWeights) {
        let mut rng = Rng::new(seed);
        let c = 16;
        let x = FeatureMap::random(12, c, &mut rng);
        let base: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let scales: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
        let p = rank_one_projections(c, &base, &scales, &mut rng).unwrap();
        let w = CAWeights::random(c, 4, &mut rng).unwrap();
        (x, p, w)
    }

    #[test]
    fn comparison_identity_scaling() {
        let (x, p, w) = comparison_fixture(5);
        let cmp = compare_channel_mechanisms(&x, &p, &w, 1.0).unwrap();
        assert_eq!(cmp.sa_weights, cmp.sa_weights_scaled);
        assert_eq!(cmp.ca_scores, cmp.ca_scores_scaled);
        assert_eq!(cmp.ca_score_shift, 0.0);
    }

    #[test]
    fn comparison_doubling() {
        let (x, p, w) = comparison_fixture(42);
        let cmp = compare_channel_mechanisms(&x, &p, &w, 2.0).unwrap();
        assert!(cmp.ca_score_shift > 1e-6, "{}", cmp.ca_score_shift);
        assert!(cmp.sa_homogeneity_error <= 1e-9);
        assert!(cmp.sa_weight_scaling_error <= 1e-9);
    }
}
