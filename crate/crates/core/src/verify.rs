//! Property suites behind `linatt verify` and `linatt gradcheck`.
//!
//! Each suite runs a set of seeded instances and reports the worst error it
//! saw, and the first failing instance's seed and shape when it fails.

use std::fmt;

use crate::attention::{
    channel_weight_report, elementwise_oracle_linear, elementwise_oracle_quadratic, forward,
    OracleKernel, Variant, ORACLE_MAX_N,
};
use crate::channel_attention::{compare_channel_mechanisms, CAWeights};
use crate::error::{invalid, Result};
use crate::gradients::{check_attention_gradients, check_ca_gradients};
use crate::projections::{init_projections, rank_one_projections, FeatureMap};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const EQUIVALENCE_TOL: f64 = 1e-9;
pub const ORACLE_TOL: f64 = 1e-10;
pub const ROW_SUM_TOL: f64 = 1e-12;
pub const CHANNEL_TOL: f64 = 1e-9;
pub const HOMOGENEITY_TOL: f64 = 1e-9;
/// Minimum homogeneity violation the channel-attention witness must show.
pub const CA_WITNESS_MARGIN: f64 = 1e-3;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// An `N x C` instance shape, written `NxC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceShape {
    pub n: usize,
    pub c: usize,
}

impl std::str::FromStr for InstanceShape {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, c) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| invalid(format!("shape {s:?} is not of the form NxC")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| invalid(format!("bad dimension {v:?} in shape {s:?}")))
        };
        Ok(Self {
            n: parse(n)?,
            c: parse(c)?,
        })
    }
}

impl fmt::Display for InstanceShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n, self.c)
    }
}

pub fn parse_shapes(list: &str) -> Result<Vec<InstanceShape>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub const DEFAULT_VERIFY_SIZES: &str = "1x8,4x2,7x8,64x16,257x64";
pub const DEFAULT_GRADCHECK_SIZES: &str = "1x4,6x4,8x8";

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub instances: usize,
    /// Worst error seen, in the suite's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub failure: Option<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {:<16} {:>4} instances, worst {:.3e} (tol {:.0e})",
            self.name, self.instances, self.worst, self.tolerance
        )?;
        if let Some(why) = &self.failure {
            write!(f, "\n     first failure: {why}")?;
        }
        Ok(())
    }
}

struct Suite {
    outcome: SuiteOutcome,
}

impl Suite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            outcome: SuiteOutcome {
                name,
                instances: 0,
                worst: 0.0,
                tolerance,
                failure: None,
            },
        }
    }

    /// Records one instance whose error must not exceed the tolerance.
    fn at_most(&mut self, err: f64, context: impl FnOnce() -> String) {
        self.outcome.instances += 1;
        self.outcome.worst = self
            .outcome
            .worst
            .max(if err.is_nan() { f64::INFINITY } else { err });
        if (err.is_nan() || err > self.outcome.tolerance) && self.outcome.failure.is_none() {
            self.outcome.failure = Some(format!("{} (error {err:.3e})", context()));
        }
    }

    fn fail(&mut self, why: String) {
        self.outcome.instances += 1;
        if self.outcome.failure.is_none() {
            self.outcome.failure = Some(why);
        }
    }

    fn finish(self) -> SuiteOutcome {
        self.outcome
    }
}

/// Per-instance seed derived from the run seed.
pub fn instance_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

/// Reductions exercised for `c` channels: always 1, plus `r` if it divides `c`.
pub fn reductions(c: usize, r: usize) -> Vec<usize> {
    let mut out = vec![1];
    if r > 1 && c.is_multiple_of(r) {
        out.push(r);
    }
    out
}

/// Bottleneck used for channel attention with `c` channels.
pub fn ca_bottleneck(c: usize) -> usize {
    [16, 8, 4, 2, 1]
        .into_iter()
        .find(|&rho| c.is_multiple_of(rho))
        .unwrap_or(1)
}

fn max_rel(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.max_rel_diff(b, 1e-300)
}

pub fn softmax_suite(seed: u64, sizes: &[InstanceShape]) -> SuiteOutcome {
    let mut suite = Suite::new("softmax", ROW_SUM_TOL);
    let witness = Matrix::from_rows(&[[1000.0, 1001.0]]).expect("static");
    let e = std::f64::consts::E;
    match witness.row_softmax() {
        Ok(s) if s.is_finite() => {
            let err = (s.get(0, 0) - 1.0 / (1.0 + e))
                .abs()
                .max((s.get(0, 1) - e / (1.0 + e)).abs());
            suite.at_most(err, || "stability witness [1000, 1001]".into());
        }
        _ => suite.fail("stability witness [1000, 1001] overflowed".into()),
    }
    let mut shapes: Vec<(usize, usize)> = sizes.iter().map(|s| (s.n, s.n)).collect();
    shapes.extend((0..100).map(|i| (1 + i % 9, 1 + (i * 7) % 13)));
    for (idx, (rows, cols)) in shapes.into_iter().enumerate() {
        let s = instance_seed(seed, idx as u64);
        let mut rng = Rng::new(s);
        let m = Matrix::random_uniform(rows, cols, 50.0, &mut rng);
        match m.row_softmax() {
            Ok(sm) => {
                let err = (0..rows)
                    .map(|i| (sm.row(i).iter().sum::<f64>() - 1.0).abs())
                    .fold(0.0, f64::max);
                let in_range = sm.data().iter().all(|&v| v > 0.0 && v <= 1.0);
                suite.at_most(if in_range { err } else { f64::INFINITY }, || {
                    format!("seed={s} shape={rows}x{cols}")
                });
            }
            Err(e) => suite.fail(format!("seed={s} shape={rows}x{cols}: {e}")),
        }
    }
    suite.finish()
}

pub fn equivalence_suite(seed: u64, sizes: &[InstanceShape], r: usize) -> SuiteOutcome {
    let mut suite = Suite::new("equivalence", EQUIVALENCE_TOL);
    let mut idx = 0;
    for shape in sizes {
        for red in reductions(shape.c, r) {
            let s = instance_seed(seed, idx);
            idx += 1;
            let ctx = || format!("seed={s} shape={shape} r={red}");
            let run = || -> Result<f64> {
                let mut rng = Rng::new(s);
                let x = FeatureMap::random(shape.n, shape.c, &mut rng);
                let p = init_projections(shape.c, red, &mut rng)?;
                let q = forward(Variant::LinearQuadraticOrder, &x, &p)?;
                let l = forward(Variant::LinearLinearOrder, &x, &p)?;
                max_rel(&q.output, &l.output)
            };
            match run() {
                Ok(err) => suite.at_most(err, ctx),
                Err(e) => suite.fail(format!("{}: {e}", ctx())),
            }
        }
    }
    suite.finish()
}

pub fn oracle_suite(seed: u64, sizes: &[InstanceShape], r: usize) -> SuiteOutcome {
    let mut suite = Suite::new("oracle", ORACLE_TOL);
    let mut idx = 0;
    for shape in sizes.iter().filter(|s| s.n <= ORACLE_MAX_N) {
        for red in reductions(shape.c, r) {
            let s = instance_seed(seed, 1000 + idx);
            idx += 1;
            let ctx = || format!("seed={s} shape={shape} r={red}");
            let run = || -> Result<f64> {
                let mut rng = Rng::new(s);
                let x = FeatureMap::random(shape.n, shape.c, &mut rng);
                let p = init_projections(shape.c, red, &mut rng)?;
                let softmax = elementwise_oracle_quadratic(&x, &p, OracleKernel::Softmax)?;
                let linear = elementwise_oracle_linear(&x, &p)?;
                let mut worst = forward(Variant::VanillaSoftmax, &x, &p)?
                    .output
                    .max_abs_diff(&softmax)?;
                for v in [Variant::LinearQuadraticOrder, Variant::LinearLinearOrder] {
                    worst = worst.max(forward(v, &x, &p)?.output.max_abs_diff(&linear)?);
                }
                Ok(worst)
            };
            match run() {
                Ok(err) => suite.at_most(err, ctx),
                Err(e) => suite.fail(format!("{}: {e}", ctx())),
            }
        }
    }
    suite.finish()
}

/// Random rank-one query weights with `c` channels and `r = 1`.
pub fn rank_one_instance(
    n: usize,
    c: usize,
    seed: u64,
) -> Result<(FeatureMap, crate::ProjectionSet)> {
    let mut rng = Rng::new(seed);
    let x = FeatureMap::random(n, c, &mut rng);
    let base: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let scales: Vec<f64> = (0..c)
        .map(|_| {
            let mag = rng.uniform(0.25, 2.0);
            if rng.below(2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let p = rank_one_projections(c, &base, &scales, &mut rng)?;
    Ok((x, p))
}

pub fn channel_scaling_suite(seed: u64, sizes: &[InstanceShape]) -> SuiteOutcome {
    let mut suite = Suite::new("channel_scaling", CHANNEL_TOL);
    for (idx, shape) in sizes.iter().enumerate() {
        let s = instance_seed(seed, 2000 + idx as u64);
        let ctx = || format!("seed={s} shape={shape} r=1");
        let run = || -> Result<f64> {
            let (x, p) = rank_one_instance(shape.n, shape.c, s)?;
            let rep = channel_weight_report(&x, &p)?;
            let closed = rep
                .weights
                .iter()
                .zip(&rep.closed_form)
                .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
                .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
                .fold(0.0, f64::max);
            Ok(rep.relative_residual.max(closed))
        };
        match run() {
            Ok(err) => suite.at_most(err, ctx),
            Err(e) => suite.fail(format!("{}: {e}", ctx())),
        }
    }
    suite.finish()
}

/// Channel-attention instance with positive inputs and positive first-layer
/// weights, so every bottleneck unit is active and the sigmoid sees nonzero
/// logits. A dead ReLU layer would make the scores constant.
pub fn ca_witness(n: usize, c: usize, seed: u64) -> Result<(FeatureMap, CAWeights)> {
    let mut rng = Rng::new(seed);
    let mut values = Matrix::random_uniform(n, c, 0.5, &mut rng);
    values.data_mut().iter_mut().for_each(|v| *v += 1.0);
    let rho = ca_bottleneck(c);
    let mut w1 = Matrix::random_uniform(c, c / rho, 0.375, &mut rng);
    w1.data_mut().iter_mut().for_each(|v| *v += 0.625);
    let w = CAWeights::new(w1, Matrix::random_uniform(c / rho, c, 1.0, &mut rng), rho)?;
    Ok((FeatureMap::new(values), w))
}

pub const HOMOGENEITY_ALPHAS: [f64; 3] = [0.5, 2.0, 3.0];

pub fn homogeneity_suite(seed: u64, sizes: &[InstanceShape], r: usize) -> SuiteOutcome {
    let mut suite = Suite::new("homogeneity", HOMOGENEITY_TOL);
    let mut idx = 0;
    for shape in sizes {
        for red in reductions(shape.c, r) {
            let s = instance_seed(seed, 3000 + idx);
            idx += 1;
            let ctx = || format!("seed={s} shape={shape} r={red}");
            let run = || -> Result<f64> {
                let mut rng = Rng::new(s);
                let x = FeatureMap::random(shape.n, shape.c, &mut rng);
                let p = init_projections(shape.c, red, &mut rng)?;
                let base = forward(Variant::LinearLinearOrder, &x, &p)?.output;
                let mut worst = 0.0f64;
                for alpha in HOMOGENEITY_ALPHAS {
                    let scaled = forward(Variant::LinearLinearOrder, &x.scaled(alpha), &p)?.output;
                    worst = worst.max(max_rel(&base.scale(alpha.powi(3)), &scaled)?);
                }
                Ok(worst)
            };
            match run() {
                Ok(err) => suite.at_most(err, ctx),
                Err(e) => suite.fail(format!("{}: {e}", ctx())),
            }
        }
    }
    // channel attention must not be homogeneous
    let s = instance_seed(seed, 3999);
    let witness = || -> Result<f64> {
        let c = sizes.iter().map(|s| s.c).max().unwrap_or(16).max(2);
        let (x, w) = ca_witness(16, c, s)?;
        let (_, p) = rank_one_instance(16, c, s)?;
        let cmp = compare_channel_mechanisms(&x, &p, &w, 2.0)?;
        Ok(cmp.ca_homogeneity_error)
    };
    match witness() {
        Ok(v) if v > CA_WITNESS_MARGIN => suite.at_most(0.0, String::new),
        Ok(v) => suite.fail(format!(
            "seed={s}: channel attention looked homogeneous (violation {v:.3e} <= {CA_WITNESS_MARGIN:.0e})"
        )),
        Err(e) => suite.fail(format!("seed={s}: {e}")),
    }
    suite.finish()
}

pub fn run_verify(seed: u64, sizes: &[InstanceShape], r: usize) -> Vec<SuiteOutcome> {
    vec![
        softmax_suite(seed, sizes),
        equivalence_suite(seed, sizes, r),
        oracle_suite(seed, sizes, r),
        channel_scaling_suite(seed, sizes),
        homogeneity_suite(seed, sizes, r),
    ]
}

/// Gradient checks for every attention variant and channel attention.
pub fn run_gradcheck(
    seed: u64,
    sizes: &[InstanceShape],
    r: usize,
    h: f64,
    instances_per_shape: usize,
) -> Vec<SuiteOutcome> {
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let name = match variant {
            Variant::VanillaSoftmax => "grad_vanilla",
            Variant::LinearQuadraticOrder => "grad_linear_quad",
            Variant::LinearLinearOrder => "grad_linear",
        };
        let mut suite = Suite::new(name, GRADIENT_TOL);
        let mut idx = 0;
        for shape in sizes {
            for red in reductions(shape.c, r) {
                for _ in 0..instances_per_shape {
                    let s = instance_seed(seed, 4000 + idx);
                    idx += 1;
                    let ctx = || format!("seed={s} shape={shape} r={red} h={h}");
                    let run = || -> Result<f64> {
                        let mut rng = Rng::new(s);
                        let x = FeatureMap::random(shape.n, shape.c, &mut rng);
                        let p = init_projections(shape.c, red, &mut rng)?;
                        let g = Matrix::random_uniform(shape.n, shape.c, 1.0, &mut rng);
                        Ok(check_attention_gradients(variant, &x, &p, &g, h)?.worst())
                    };
                    match run() {
                        Ok(err) => suite.at_most(err, ctx),
                        Err(e) => suite.fail(format!("{}: {e}", ctx())),
                    }
                }
            }
        }
        out.push(suite.finish());
    }
    let mut suite = Suite::new("grad_channel_att", GRADIENT_TOL);
    let mut idx = 0;
    for shape in sizes {
        for _ in 0..instances_per_shape {
            let s = instance_seed(seed, 9000 + idx);
            idx += 1;
            let ctx = || format!("seed={s} shape={shape} h={h}");
            let run = || -> Result<f64> {
                let mut rng = Rng::new(s);
                let x = FeatureMap::random(shape.n, shape.c, &mut rng);
                let w = CAWeights::random(shape.c, ca_bottleneck(shape.c), &mut rng)?;
                let g = Matrix::random_uniform(shape.n, shape.c, 1.0, &mut rng);
                Ok(check_ca_gradients(&x, &w, &g, h)?.worst())
            };
            match run() {
                Ok(err) => suite.at_most(err, ctx),
                Err(e) => suite.fail(format!("{}: {e}", ctx())),
            }
        }
    }
    out.push(suite.finish());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        let shapes = parse_shapes("4x2, 64X16").unwrap();
        assert_eq!(
            shapes,
            vec![InstanceShape { n: 4, c: 2 }, InstanceShape { n: 64, c: 16 }]
        );
        assert!(parse_shapes("4by2").is_err());
        assert!(parse_shapes("0x2").is_err());
        assert!(parse_shapes("4x").is_err());
        assert_eq!(InstanceShape { n: 6, c: 4 }.to_string(), "6x4");
    }

    #[test]
    fn default_verify_passes() {
        let sizes = parse_shapes(DEFAULT_VERIFY_SIZES).unwrap();
        for outcome in run_verify(7, &sizes, 8) {
            assert!(outcome.passed(), "{outcome}");
            assert!(outcome.instances > 0);
        }
    }

    #[test]
    fn gradcheck_small_passes() {
        let sizes = parse_shapes("6x4").unwrap();
        let outcomes = run_gradcheck(1, &sizes, 8, DEFAULT_FD_STEP, 1);
        assert_eq!(outcomes.len(), 4);
        for o in outcomes {
            assert!(o.passed(), "{o}");
        }
    }

    #[test]
    fn reductions_include_r_only_when_it_divides() {
        assert_eq!(reductions(2, 8), vec![1]);
        assert_eq!(reductions(16, 8), vec![1, 8]);
        assert_eq!(ca_bottleneck(4), 4);
        assert_eq!(ca_bottleneck(64), 16);
    }

    #[test]
    fn failing_suite_reports_context() {
        let mut suite = Suite::new("t", 1e-3);
        suite.at_most(1e-4, || "fine".into());
        suite.at_most(1.0, || "seed=9 shape=4x2".into());
        let o = suite.finish();
        assert!(!o.passed());
        assert!(o.to_string().contains("seed=9 shape=4x2"));
        assert_eq!(o.worst, 1.0);
    }
}
