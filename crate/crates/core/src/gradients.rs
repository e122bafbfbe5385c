//! Hand-derived backward passes for the loss `⟨out, G⟩` with a fixed
//! upstream gradient `G`, plus a central-difference oracle.
//!
//! All three attention backwards recompute their forward. Intermediates are
//! kept alive until the bundle is built, so the peak ledger count is the sum
//! of every matrix allocated (see [`crate::bench::predict_peak_floats`]).

use serde::Serialize;

use crate::attention::Variant;
use crate::channel_attention::{ca_forward_full, CAWeights};
use crate::error::{invalid, Error, Result};
use crate::projections::{embed, Embeddings, FeatureMap, ProjectionSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_x: Matrix,
    pub d_wz: Matrix,
    pub d_wy: Matrix,
    pub d_wphi: Matrix,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct CaGradients {
    pub d_x: Matrix,
    pub d_w1: Matrix,
    pub d_w2: Matrix,
    pub loss: f64,
}

fn check_upstream(x: &FeatureMap, upstream: &Matrix) -> Result<()> {
    if upstream.shape() != x.values().shape() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            left: x.values().shape(),
            right: upstream.shape(),
        });
    }
    Ok(())
}

pub fn backward(
    variant: Variant,
    x: &FeatureMap,
    p: &ProjectionSet,
    upstream: &Matrix,
) -> Result<GradientBundle> {
    match variant {
        Variant::VanillaSoftmax => backward_vanilla(x, p, upstream),
        Variant::LinearQuadraticOrder => backward_linear_quadratic(x, p, upstream),
        Variant::LinearLinearOrder => backward_linear(x, p, upstream),
    }
}

/// Pulls the embedding gradients back to `x` and the three weights.
fn finish(
    x: &FeatureMap,
    p: &ProjectionSet,
    d_z: Matrix,
    d_y: Matrix,
    d_phi: Matrix,
    loss: f64,
) -> Result<GradientBundle> {
    let xv = x.values();
    let d_wz = xv.matmul_tn(&d_z)?;
    let d_wy = xv.matmul_tn(&d_y)?;
    let d_wphi = xv.matmul_tn(&d_phi)?;
    let mut d_x = d_z.matmul_nt(p.w_z())?;
    d_x.add_matmul_nt(&d_y, p.w_y())?;
    d_x.add_matmul_nt(&d_phi, p.w_phi())?;
    Ok(GradientBundle {
        d_x,
        d_wz,
        d_wy,
        d_wphi,
        loss,
    })
}

/// Row-wise softmax Jacobian-vector product, in place:
/// `g_i ← a_i ⊙ (g_i - ⟨g_i, a_i⟩)`.
fn softmax_backward_in_place(a: &Matrix, g: &mut Matrix) {
    for i in 0..a.rows() {
        let a_row = a.row(i);
        let g_row = g.row_mut(i);
        let dot: f64 = a_row.iter().zip(g_row.iter()).map(|(a, g)| a * g).sum();
        for (g, &a) in g_row.iter_mut().zip(a_row) {
            *g = a * (*g - dot);
        }
    }
}

pub fn backward_vanilla(
    x: &FeatureMap,
    p: &ProjectionSet,
    upstream: &Matrix,
) -> Result<GradientBundle> {
    check_upstream(x, upstream)?;
    let Embeddings { z, y, phi } = embed(x, p)?;
    let mut a = z.matmul_nt(&y)?;
    a.row_softmax_in_place()?;
    let mut d_a = upstream.matmul_nt(&phi)?;
    // ⟨A·phi, G⟩ = ⟨A, G·phiᵀ⟩
    let loss = a.frobenius_dot(&d_a)?;
    let d_phi = a.matmul_tn(upstream)?;
    softmax_backward_in_place(&a, &mut d_a);
    let d_z = d_a.matmul(&y)?;
    let d_y = d_a.matmul_tn(&z)?;
    finish(x, p, d_z, d_y, d_phi, loss)
}

/// Backward through `(z·yᵀ / N) · phi`; the cross-check route for
/// [`backward_linear`].
pub fn backward_linear_quadratic(
    x: &FeatureMap,
    p: &ProjectionSet,
    upstream: &Matrix,
) -> Result<GradientBundle> {
    check_upstream(x, upstream)?;
    let inv_n = 1.0 / x.n_positions() as f64;
    let Embeddings { z, y, phi } = embed(x, p)?;
    let mut m = z.matmul_nt(&y)?;
    m.scale_in_place(inv_n);
    let mut d_m = upstream.matmul_nt(&phi)?;
    let loss = m.frobenius_dot(&d_m)?;
    let d_phi = m.matmul_tn(upstream)?;
    d_m.scale_in_place(inv_n);
    let d_z = d_m.matmul(&y)?;
    let d_y = d_m.matmul_tn(&z)?;
    finish(x, p, d_z, d_y, d_phi, loss)
}

/// Backward through `z · (yᵀ·phi / N)`. Every intermediate is `N x C`,
/// `N x C/r` or `C/r x C`.
pub fn backward_linear(
    x: &FeatureMap,
    p: &ProjectionSet,
    upstream: &Matrix,
) -> Result<GradientBundle> {
    check_upstream(x, upstream)?;
    let inv_n = 1.0 / x.n_positions() as f64;
    let Embeddings { z, y, phi } = embed(x, p)?;
    let mut b = y.matmul_tn(&phi)?;
    b.scale_in_place(inv_n);
    let mut d_b = z.matmul_tn(upstream)?;
    // ⟨z·B, G⟩ = ⟨B, zᵀ·G⟩
    let loss = b.frobenius_dot(&d_b)?;
    let d_z = upstream.matmul_nt(&b)?;
    d_b.scale_in_place(inv_n);
    let d_y = phi.matmul_nt(&d_b)?;
    let d_phi = y.matmul(&d_b)?;
    finish(x, p, d_z, d_y, d_phi, loss)
}

/// Backward through pooling, the ReLU/sigmoid bottleneck and the channel
/// rescale. ReLU's derivative at exactly zero is taken as zero.
pub fn backward_ca(x: &FeatureMap, w: &CAWeights, upstream: &Matrix) -> Result<CaGradients> {
    check_upstream(x, upstream)?;
    let fwd = ca_forward_full(x, w)?;
    let xv = x.values();
    let (n, c) = (xv.rows(), xv.cols());
    let loss = fwd.out.values().frobenius_dot(upstream)?;

    // direct path: out[:,k] = s_k x[:,k]
    let mut d_x = Matrix::zeros(n, c);
    let mut d_s = vec![0.0; c];
    for i in 0..n {
        let (x_row, g_row) = (xv.row(i), upstream.row(i));
        for k in 0..c {
            d_s[k] += g_row[k] * x_row[k];
            d_x.row_mut(i)[k] = g_row[k] * fwd.scores[k];
        }
    }

    let d_pre: Vec<f64> = d_s
        .iter()
        .zip(&fwd.scores)
        .map(|(g, s)| g * s * (1.0 - s))
        .collect();
    let activated: Vec<f64> = fwd.hidden.iter().map(|&h| h.max(0.0)).collect();
    let d_w2 = outer(&activated, &d_pre);
    let d_act = mat_vec(w.w2(), &d_pre);
    let d_hidden: Vec<f64> = d_act
        .iter()
        .zip(&fwd.hidden)
        .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
        .collect();
    let d_w1 = outer(&fwd.pooled, &d_hidden);
    let d_pooled = mat_vec(w.w1(), &d_hidden);

    // pooling path: every position receives d_pooled / N
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        for (d, g) in d_x.row_mut(i).iter_mut().zip(&d_pooled) {
            *d += g * inv_n;
        }
    }
    Ok(CaGradients {
        d_x,
        d_w1,
        d_w2,
        loss,
    })
}

fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let data = u
        .iter()
        .flat_map(|&a| v.iter().map(move |&b| a * b))
        .collect();
    Matrix::from_vec(u.len(), v.len(), data).expect("non-empty outer product")
}

/// `m · v` for a column vector `v`.
fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Plain forward of the channel-attention loss, for the oracle.
pub fn ca_loss(x: &FeatureMap, w: &CAWeights, upstream: &Matrix) -> Result<f64> {
    let fwd = ca_forward_full(x, w)?;
    fwd.out.values().frobenius_dot(upstream)
}

/// Central differences `(f(θ + h e_k) - f(θ - h e_k)) / 2h` for every
/// coordinate `k` of `theta`.
pub fn finite_difference_oracle<F>(mut f: F, theta: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(invalid(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = theta.clone();
    let mut grad = Matrix::zeros(theta.rows(), theta.cols());
    for k in 0..theta.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {k}")));
        }
        grad.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`, maximized over coordinates.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_relative_error",
            left: analytic.shape(),
            right: numeric.shape(),
        });
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// Worst relative error of each analytic gradient against the oracle.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub label: String,
    pub errors: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

pub fn attention_loss(
    variant: Variant,
    x: &FeatureMap,
    p: &ProjectionSet,
    upstream: &Matrix,
) -> Result<f64> {
    crate::attention::forward(variant, x, p)?
        .output
        .frobenius_dot(upstream)
}

/// Compares [`backward`] against central differences for every parameter.
pub fn check_attention_gradients(
    variant: Variant,
    x: &FeatureMap,
    p: &ProjectionSet,
    upstream: &Matrix,
    h: f64,
) -> Result<GradCheck> {
    let g = backward(variant, x, p, upstream)?;
    let (w_z, w_y, w_phi, r) = p.clone().into_parts();
    let rebuild = |wz: &Matrix, wy: &Matrix, wp: &Matrix| {
        ProjectionSet::new(wz.clone(), wy.clone(), wp.clone(), r)
    };
    let num_x = finite_difference_oracle(
        |t| attention_loss(variant, &FeatureMap::new(t.clone()), p, upstream),
        x.values(),
        h,
    )?;
    let num_wz = finite_difference_oracle(
        |t| attention_loss(variant, x, &rebuild(t, &w_y, &w_phi)?, upstream),
        &w_z,
        h,
    )?;
    let num_wy = finite_difference_oracle(
        |t| attention_loss(variant, x, &rebuild(&w_z, t, &w_phi)?, upstream),
        &w_y,
        h,
    )?;
    let num_wphi = finite_difference_oracle(
        |t| attention_loss(variant, x, &rebuild(&w_z, &w_y, t)?, upstream),
        &w_phi,
        h,
    )?;
    Ok(GradCheck {
        label: variant.name().to_string(),
        errors: vec![
            ("x".into(), max_relative_error(&g.d_x, &num_x)?),
            ("w_z".into(), max_relative_error(&g.d_wz, &num_wz)?),
            ("w_y".into(), max_relative_error(&g.d_wy, &num_wy)?),
            ("w_phi".into(), max_relative_error(&g.d_wphi, &num_wphi)?),
        ],
    })
}

pub fn check_ca_gradients(
    x: &FeatureMap,
    w: &CAWeights,
    upstream: &Matrix,
    h: f64,
) -> Result<GradCheck> {
    let g = backward_ca(x, w, upstream)?;
    let rho = w.rho();
    let num_x = finite_difference_oracle(
        |t| ca_loss(&FeatureMap::new(t.clone()), w, upstream),
        x.values(),
        h,
    )?;
    let num_w1 = finite_difference_oracle(
        |t| {
            ca_loss(
                x,
                &CAWeights::new(t.clone(), w.w2().clone(), rho)?,
                upstream,
            )
        },
        w.w1(),
        h,
    )?;
    let num_w2 = finite_difference_oracle(
        |t| {
            ca_loss(
                x,
                &CAWeights::new(w.w1().clone(), t.clone(), rho)?,
                upstream,
            )
        },
        w.w2(),
        h,
    )?;
    Ok(GradCheck {
        label: "channel_attention".into(),
        errors: vec![
            ("x".into(), max_relative_error(&g.d_x, &num_x)?),
            ("w1".into(), max_relative_error(&g.d_w1, &num_w1)?),
            ("w2".into(), max_relative_error(&g.d_w2, &num_w2)?),
        ],
    })
}
