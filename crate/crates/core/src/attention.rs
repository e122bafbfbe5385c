//! Softmax self-attention and its linearized counterpart.
//!
//! With `z`, `y`, `phi` the query, key and value embeddings of an `N x C`
//! feature map:
//!
//! * vanilla: `out = softmax_rows(z·yᵀ) · phi`, an `N x N` attention map;
//! * linear, quadratic order: `out = (z·yᵀ / N) · phi`;
//! * linear, linear order: `out = z · (yᵀ·phi / N)`, a `(C/r) x C` map.
//!
//! The two linear orders are the same product bracketed differently. Only
//! the last one avoids an `N x N` intermediate.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::projections::{embed, Embeddings, FeatureMap, ProjectionSet};
use crate::tensor::Matrix;

/// Largest `N` accepted by the scalar-loop oracles.
pub const ORACLE_MAX_N: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "vanilla")]
    VanillaSoftmax,
    #[serde(rename = "linear_quadratic")]
    LinearQuadraticOrder,
    #[serde(rename = "linear")]
    LinearLinearOrder,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::VanillaSoftmax,
        Variant::LinearQuadraticOrder,
        Variant::LinearLinearOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaSoftmax => "vanilla",
            Variant::LinearQuadraticOrder => "linear_quadratic",
            Variant::LinearLinearOrder => "linear",
        }
    }

    /// True if the variant builds an `N x N` map.
    pub fn is_quadratic(self) -> bool {
        !matches!(self, Variant::LinearLinearOrder)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionArtifacts {
    pub variant: Variant,
    /// `A` (N x N) for vanilla, `z·yᵀ/N` (N x N) for the quadratic linear
    /// order, `B = yᵀ·phi/N` ((C/r) x C) for the linear order.
    pub map: Matrix,
    /// `N x C`.
    pub output: Matrix,
}

pub fn forward(variant: Variant, x: &FeatureMap, p: &ProjectionSet) -> Result<AttentionArtifacts> {
    match variant {
        Variant::VanillaSoftmax => vanilla_sa_forward(x, p),
        Variant::LinearQuadraticOrder => linear_sa_forward_quadratic(x, p),
        Variant::LinearLinearOrder => linear_sa_forward_linear(x, p),
    }
}

pub fn vanilla_sa_forward(x: &FeatureMap, p: &ProjectionSet) -> Result<AttentionArtifacts> {
    let Embeddings { z, y, phi } = embed(x, p)?;
    let logits = z.matmul_nt(&y)?;
    let (map, output) = attend_softmax(logits, &phi)?;
    Ok(AttentionArtifacts {
        variant: Variant::VanillaSoftmax,
        map,
        output,
    })
}

/// Softmax over the rows of `logits` (in place), then `A · phi`.
pub fn attend_softmax(mut logits: Matrix, phi: &Matrix) -> Result<(Matrix, Matrix)> {
    logits.row_softmax_in_place()?;
    let out = logits.matmul(phi)?;
    Ok((logits, out))
}

pub fn linear_sa_forward_quadratic(
    x: &FeatureMap,
    p: &ProjectionSet,
) -> Result<AttentionArtifacts> {
    let Embeddings { z, y, phi } = embed(x, p)?;
    let logits = z.matmul_nt(&y)?;
    let (map, output) = attend_linear(logits, &phi)?;
    Ok(AttentionArtifacts {
        variant: Variant::LinearQuadraticOrder,
        map,
        output,
    })
}

/// `(logits / N) · phi`, dividing in place.
pub fn attend_linear(mut logits: Matrix, phi: &Matrix) -> Result<(Matrix, Matrix)> {
    logits.scale_in_place(1.0 / logits.rows() as f64);
    let out = logits.matmul(phi)?;
    Ok((logits, out))
}

pub fn linear_sa_forward_linear(x: &FeatureMap, p: &ProjectionSet) -> Result<AttentionArtifacts> {
    let Embeddings { z, y, phi } = embed(x, p)?;
    let mut b = y.matmul_tn(&phi)?;
    b.scale_in_place(1.0 / x.n_positions() as f64);
    let output = z.matmul(&b)?;
    Ok(AttentionArtifacts {
        variant: Variant::LinearLinearOrder,
        map: b,
        output,
    })
}

/// `x + gamma · out`: the residual path SA blocks usually wrap around the
/// attention output.
pub fn residual_combine(x: &FeatureMap, out: &Matrix, gamma: f64) -> Result<Matrix> {
    let mut combined = out.scale(gamma);
    combined.add_assign(x.values())?;
    Ok(combined)
}

// ---------------------------------------------------------------------------
// Scalar-loop oracles. Nothing below calls into `Matrix` arithmetic.

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn loop_product(a: &Rows, w: &Rows) -> Rows {
    a.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| row.iter().zip(w).map(|(&v, w_row)| v * w_row[j]).sum())
                .collect()
        })
        .collect()
}

fn oracle_embed(x: &FeatureMap, p: &ProjectionSet) -> Result<(Rows, Rows, Rows)> {
    p.check_input(x)?;
    if x.n_positions() > ORACLE_MAX_N {
        return Err(Error::OracleTooLarge {
            n: x.n_positions(),
            limit: ORACLE_MAX_N,
        });
    }
    let xs = to_rows(x.values());
    Ok((
        loop_product(&xs, &to_rows(p.w_z())),
        loop_product(&xs, &to_rows(p.w_y())),
        loop_product(&xs, &to_rows(p.w_phi())),
    ))
}

fn rows_to_matrix(rows: Rows) -> Matrix {
    let (n, c) = (rows.len(), rows[0].len());
    Matrix::from_vec(n, c, rows.into_iter().flatten().collect()).expect("oracle shape")
}

/// Pairwise weighting used by [`elementwise_oracle_quadratic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKernel {
    /// `A_ik = exp(z_i·y_k) / Σ_l exp(z_i·y_l)`
    Softmax,
    /// `A_ik = z_i·y_k / N`
    DotOverN,
}

/// `out_ij = Σ_k A_ik phi_kj` with every `A_ik` built from scalar loops.
pub fn elementwise_oracle_quadratic(
    x: &FeatureMap,
    p: &ProjectionSet,
    kernel: OracleKernel,
) -> Result<Matrix> {
    let (z, y, phi) = oracle_embed(x, p)?;
    let n = z.len();
    let c = phi[0].len();
    let mut out = vec![vec![0.0; c]; n];
    for i in 0..n {
        let mut weights: Vec<f64> = (0..n)
            .map(|k| z[i].iter().zip(&y[k]).map(|(a, b)| a * b).sum())
            .collect();
        match kernel {
            OracleKernel::Softmax => {
                let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for w in &mut weights {
                    *w = (*w - max).exp();
                    total += *w;
                }
                for w in &mut weights {
                    *w /= total;
                }
            }
            OracleKernel::DotOverN => {
                for w in &mut weights {
                    *w /= n as f64;
                }
            }
        }
        for j in 0..c {
            let mut acc = 0.0;
            for k in 0..n {
                acc += weights[k] * phi[k][j];
            }
            out[i][j] = acc;
        }
    }
    Ok(rows_to_matrix(out))
}

/// `out_ij = Σ_k z_ik t_kj` with `t_kj = Σ_m y_mk phi_mj / N`.
pub fn elementwise_oracle_linear(x: &FeatureMap, p: &ProjectionSet) -> Result<Matrix> {
    let (z, y, phi) = oracle_embed(x, p)?;
    let t = oracle_t(&y, &phi);
    let (n, k_dim, c) = (z.len(), t.len(), phi[0].len());
    let mut out = vec![vec![0.0; c]; n];
    for i in 0..n {
        for j in 0..c {
            let mut acc = 0.0;
            for k in 0..k_dim {
                acc += t[k][j] * z[i][k];
            }
            out[i][j] = acc;
        }
    }
    Ok(rows_to_matrix(out))
}

fn oracle_t(y: &Rows, phi: &Rows) -> Rows {
    let n = y.len();
    let (k_dim, c) = (y[0].len(), phi[0].len());
    let mut t = vec![vec![0.0; c]; k_dim];
    for (k, t_row) in t.iter_mut().enumerate() {
        for (j, t_kj) in t_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in 0..n {
                acc += y[m][k] * phi[m][j];
            }
            *t_kj = acc / n as f64;
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Channel-weight interpretation.

/// Per-channel reading of the linear module under rank-one query weights:
/// each output channel is a scalar multiple of the matching query channel.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelWeightReport {
    /// Least-squares `c_i` minimizing `|out'_i - c_i z'_i|`; `None` when
    /// `z'_i` is identically zero.
    pub weights: Vec<Option<f64>>,
    /// `c_i = Σ_k (s_k / s_i) t_ki` from the query channel scales `s`.
    pub closed_form: Vec<Option<f64>>,
    /// `t = yᵀ·phi / N`, `(C/r) x C`.
    pub t: Matrix,
    /// Max over defined channels and positions of `|out'_i - c_i z'_i|`.
    pub residual: f64,
    /// `residual / max|out|`.
    pub relative_residual: f64,
    pub undefined_channels: Vec<usize>,
}

/// Ratios `s_k / s_pivot` of the columns of a rank-one `w_z`, expressed
/// through one nonzero pivot row.
fn rank_one_scales(w_z: &Matrix) -> Result<Vec<f64>> {
    let pivot = (0..w_z.rows())
        .max_by(|&a, &b| {
            let na = w_z.row(a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let nb = w_z.row(b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            na.total_cmp(&nb)
        })
        .expect("non-empty weights");
    let scales = w_z.row(pivot).to_vec();
    let base: Vec<f64> = {
        let (idx, &s) = scales
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("non-empty row");
        if s == 0.0 {
            return Err(invalid("query weights are identically zero"));
        }
        w_z.column(idx).iter().map(|v| v / s).collect()
    };
    let tol = 1e-12 * w_z.max_abs();
    for row in 0..w_z.rows() {
        for (col, &s) in scales.iter().enumerate() {
            if (w_z.get(row, col) - base[row] * s).abs() > tol {
                return Err(invalid(
                    "query projection is not rank one; channel weights are undefined",
                ));
            }
        }
    }
    Ok(scales)
}

pub fn channel_weight_report(x: &FeatureMap, p: &ProjectionSet) -> Result<ChannelWeightReport> {
    if p.reduction() != 1 {
        return Err(invalid(format!(
            "channel weights pair output channel i with query channel i and need r = 1, got r = {}",
            p.reduction()
        )));
    }
    let scales = rank_one_scales(p.w_z())?;
    let art = linear_sa_forward_linear(x, p)?;
    let z = x.values().matmul(p.w_z())?;
    let t = art.map;
    let out = art.output;
    let c = p.channels();

    let mut weights = Vec::with_capacity(c);
    let mut closed_form = Vec::with_capacity(c);
    let mut undefined = Vec::new();
    let mut residual = 0.0f64;
    for i in 0..c {
        let zi = z.column(i);
        let oi = out.column(i);
        let zz: f64 = zi.iter().map(|v| v * v).sum();
        if zz == 0.0 || scales[i] == 0.0 {
            weights.push(None);
            closed_form.push(None);
            undefined.push(i);
            continue;
        }
        let ci = zi.iter().zip(&oi).map(|(a, b)| a * b).sum::<f64>() / zz;
        for (a, b) in zi.iter().zip(&oi) {
            residual = residual.max((b - ci * a).abs());
        }
        weights.push(Some(ci));
        let closed: f64 = (0..c).map(|k| scales[k] / scales[i] * t.get(k, i)).sum();
        closed_form.push(Some(closed));
    }
    let relative_residual = if out.max_abs() > 0.0 {
        residual / out.max_abs()
    } else {
        residual
    };
    Ok(ChannelWeightReport {
        weights,
        closed_form,
        t,
        residual,
        relative_residual,
        undefined_channels: undefined,
    })
}
