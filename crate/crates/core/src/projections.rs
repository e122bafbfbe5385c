//! The three 1×1-convolution embeddings.
//!
//! A feature map is stored positions-as-rows (`N x C`), so a 1×1 convolution
//! mapping `C` to `C'` channels is right-multiplication by a `C x C'` weight
//! matrix. There are no bias terms.

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Default channel reduction applied to the query/key embeddings.
pub const DEFAULT_REDUCTION: usize = 8;

/// An `N x C` activation matrix: `N` flattened spatial positions, `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Matrix,
}

impl FeatureMap {
    pub fn new(values: Matrix) -> Self {
        Self { values }
    }

    pub fn random(n: usize, c: usize, rng: &mut Rng) -> Self {
        Self::new(Matrix::random_uniform(n, c, 1.0, rng))
    }

    pub fn n_positions(&self) -> usize {
        self.values.rows()
    }

    pub fn n_channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self::new(self.values.scale(alpha))
    }
}

impl From<Matrix> for FeatureMap {
    fn from(values: Matrix) -> Self {
        Self::new(values)
    }
}

/// Weights of the query (`w_z`), key (`w_y`) and value (`w_phi`) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    w_z: Matrix,
    w_y: Matrix,
    w_phi: Matrix,
    reduction: usize,
}

impl ProjectionSet {
    pub fn new(w_z: Matrix, w_y: Matrix, w_phi: Matrix, reduction: usize) -> Result<Self> {
        let c = w_phi.rows();
        if w_phi.cols() != c {
            return Err(invalid(format!(
                "w_phi must be square, got {}",
                w_phi.shape()
            )));
        }
        check_reduction(c, reduction)?;
        let reduced = c / reduction;
        for (name, w) in [("w_z", &w_z), ("w_y", &w_y)] {
            if w.rows() != c || w.cols() != reduced {
                return Err(invalid(format!(
                    "{name} must be {c}x{reduced} for C={c}, r={reduction}; got {}",
                    w.shape()
                )));
            }
        }
        Ok(Self {
            w_z,
            w_y,
            w_phi,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_phi.rows()
    }

    pub fn reduced_channels(&self) -> usize {
        self.w_z.cols()
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn w_z(&self) -> &Matrix {
        &self.w_z
    }

    pub fn w_y(&self) -> &Matrix {
        &self.w_y
    }

    pub fn w_phi(&self) -> &Matrix {
        &self.w_phi
    }

    pub fn w_phi_mut(&mut self) -> &mut Matrix {
        &mut self.w_phi
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Matrix, usize) {
        (self.w_z, self.w_y, self.w_phi, self.reduction)
    }

    /// Errors unless `x` has exactly `self.channels()` channels.
    pub fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.n_channels() != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: x.values().shape(),
                right: self.w_phi.shape(),
            });
        }
        Ok(())
    }
}

fn check_reduction(c: usize, r: usize) -> Result<()> {
    if c == 0 || r == 0 || !c.is_multiple_of(r) {
        return Err(invalid(format!(
            "channel count {c} must be a positive multiple of reduction {r}"
        )));
    }
    Ok(())
}

/// Query, key and value embeddings of one feature map.
#[derive(Debug)]
pub struct Embeddings {
    /// `N x C/r`
    pub z: Matrix,
    /// `N x C/r`
    pub y: Matrix,
    /// `N x C`
    pub phi: Matrix,
}

/// `z = x·w_z`, `y = x·w_y`, `phi = x·w_phi`.
pub fn embed(x: &FeatureMap, p: &ProjectionSet) -> Result<Embeddings> {
    p.check_input(x)?;
    let v = x.values();
    Ok(Embeddings {
        z: v.matmul(&p.w_z)?,
        y: v.matmul(&p.w_y)?,
        phi: v.matmul(&p.w_phi)?,
    })
}

/// Uniform `[-1/√C, 1/√C]` weights, drawn in the order `w_z`, `w_y`, `w_phi`.
pub fn init_projections(c: usize, r: usize, rng: &mut Rng) -> Result<ProjectionSet> {
    check_reduction(c, r)?;
    let bound = 1.0 / (c as f64).sqrt();
    let w_z = Matrix::random_uniform(c, c / r, bound, rng);
    let w_y = Matrix::random_uniform(c, c / r, bound, rng);
    let w_phi = Matrix::random_uniform(c, c, bound, rng);
    ProjectionSet::new(w_z, w_y, w_phi, r)
}

/// Projections whose query channels are all multiples of one direction:
/// column `i` of `w_z` is `channel_scales[i] * base_direction`, so every
/// query channel equals `channel_scales[i] * (x · base_direction)`.
///
/// The reduction is `c / channel_scales.len()`. `w_y` and `w_phi` are
/// random as in [`init_projections`].
pub fn rank_one_projections(
    c: usize,
    base_direction: &[f64],
    channel_scales: &[f64],
    rng: &mut Rng,
) -> Result<ProjectionSet> {
    if base_direction.len() != c {
        return Err(invalid(format!(
            "base direction has {} entries, expected {c}",
            base_direction.len()
        )));
    }
    if base_direction.iter().all(|&v| v == 0.0) {
        return Err(invalid("base direction must be nonzero"));
    }
    let k = channel_scales.len();
    if k == 0 || !c.is_multiple_of(k) {
        return Err(invalid(format!(
            "{k} channel scales do not divide {c} channels"
        )));
    }
    let r = c / k;
    let bound = 1.0 / (c as f64).sqrt();
    let mut w_z = Matrix::zeros(c, k);
    for (row, &b) in base_direction.iter().enumerate() {
        for (col, &s) in channel_scales.iter().enumerate() {
            w_z.set(row, col, s * b);
        }
    }
    let w_y = Matrix::random_uniform(c, k, bound, rng);
    let w_phi = Matrix::random_uniform(c, c, bound, rng);
    ProjectionSet::new(w_z, w_y, w_phi, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn zero_input_zero_embeddings() {
        let mut rng = Rng::new(1);
        let p = init_projections(16, 8, &mut rng).unwrap();
        let e = embed(&FeatureMap::new(Matrix::zeros(5, 16)), &p).unwrap();
        assert_eq!(e.z.max_abs() + e.y.max_abs() + e.phi.max_abs(), 0.0);
    }

    #[test]
    fn identity_projection_returns_input() {
        let mut rng = Rng::new(2);
        let x = FeatureMap::random(6, 3, &mut rng);
        let p = ProjectionSet::new(
            Matrix::identity(3),
            Matrix::identity(3),
            Matrix::identity(3),
            1,
        )
        .unwrap();
        let e = embed(&x, &p).unwrap();
        assert_eq!(&e.z, x.values());
        assert_eq!(&e.y, x.values());
    }

    #[test]
    fn seeded_embedding_matches_triple_loop() {
        let mut rng = Rng::new(42);
        let x = FeatureMap::random(4, 2, &mut rng);
        let p = init_projections(2, 1, &mut rng).unwrap();
        let e = embed(&x, &p).unwrap();
        assert_eq!(e.z, naive(x.values(), p.w_z()));
        assert_eq!(e.y, naive(x.values(), p.w_y()));
        assert_eq!(e.phi, naive(x.values(), p.w_phi()));
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_projections(64, 8, &mut Rng::new(11)).unwrap();
        let b = init_projections(64, 8, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.w_z().rows(), a.w_z().cols()), (64, 8));
        assert_eq!((a.w_phi().rows(), a.w_phi().cols()), (64, 64));
        let small = init_projections(8, 8, &mut Rng::new(0)).unwrap();
        assert_eq!((small.w_z().rows(), small.w_z().cols()), (8, 1));
        let bound = 1.0 / 8.0;
        assert!(a.w_phi().max_abs() <= bound);
    }

    #[test]
    fn init_rejects_non_divisor() {
        assert!(init_projections(12, 8, &mut Rng::new(0)).is_err());
        assert!(init_projections(8, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn embed_rejects_channel_mismatch() {
        let p = init_projections(8, 1, &mut Rng::new(0)).unwrap();
        let x = FeatureMap::new(Matrix::zeros(3, 4));
        assert!(matches!(embed(&x, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rank_one_channel_ratios() {
        let mut rng = Rng::new(42);
        let x = FeatureMap::random(9, 2, &mut rng);

        let p = rank_one_projections(2, &[0.3, -0.7], &[1.0, 1.0], &mut rng).unwrap();
        let z = embed(&x, &p).unwrap().z;
        assert_eq!(z.column(0), z.column(1));

        let p = rank_one_projections(2, &[0.3, -0.7], &[1.0, 2.0], &mut rng).unwrap();
        let z = embed(&x, &p).unwrap().z;
        for i in 0..9 {
            assert!((z.get(i, 1) - 2.0 * z.get(i, 0)).abs() <= 1e-15 * z.get(i, 0).abs().max(1.0));
        }

        let p = rank_one_projections(2, &[0.3, -0.7], &[1.5, -0.5], &mut rng).unwrap();
        let z = embed(&x, &p).unwrap().z;
        for i in 0..9 {
            if z.get(i, 0) != 0.0 {
                let ratio = z.get(i, 1) / z.get(i, 0);
                assert!((ratio + 1.0 / 3.0).abs() < 1e-12, "{ratio}");
            }
        }
    }

    #[test]
    fn rank_one_rejects_zero_direction() {
        assert!(rank_one_projections(2, &[0.0, 0.0], &[1.0, 1.0], &mut Rng::new(0)).is_err());
        assert!(rank_one_projections(3, &[1.0, 0.0, 0.0], &[1.0, 1.0], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn embed_is_linear() {
        let mut rng = Rng::new(8);
        let x = FeatureMap::random(7, 16, &mut rng);
        let p = init_projections(16, 8, &mut rng).unwrap();
        let e1 = embed(&x, &p).unwrap();
        let e2 = embed(&x.scaled(-2.5), &p).unwrap();
        for (a, b) in [(&e1.z, &e2.z), (&e1.y, &e2.y), (&e1.phi, &e2.phi)] {
            assert!(a.scale(-2.5).max_rel_diff(b, 1e-300).unwrap() <= 1e-12);
        }
    }
}
