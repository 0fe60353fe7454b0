//! Keypoint and transform types, the stacked 3D-to-2D affine system, and the
//! registration solvers built on it.
//!
//! A 3D-to-2D affine map sends a depth-augmented keypoint `(x, y, z)` to
//! `(m1 x + m2 y + m3 z + tx, m4 x + m5 y + m6 z + ty)`. Fitting it to `K`
//! correspondences is the linear least-squares problem `A m ≈ b` where `A` is
//! `2K × 8` and `m = [m1, m2, m3, m4, m5, m6, tx, ty]`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of correspondences for the 3D-to-2D solver.
pub const MIN_POINTS_3D: usize = 4;
/// Minimum number of correspondences for the 2D affine solver.
pub const MIN_POINTS_2D: usize = 3;
/// Default relative damping used for every training-time solve.
pub const DEFAULT_DAMPING: f64 = 1e-8;

/// Smallest eigenvalue ratio of the normal matrix accepted as full rank when
/// solving without damping (corresponds to a design-matrix condition of 1e6).
const RANK_TOLERANCE: f64 = 1e-12;

pub type Matrix8 = SMatrix<f64, 8, 8>;
pub type Vector8 = SVector<f64, 8>;

/// An ordered set of 2D landmarks in normalized image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet2D(Vec<[f64; 2]>);

impl KeypointSet2D {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("keypoints"));
        }
        Ok(KeypointSet2D(coords))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<[f64; 2]> {
        self.0
    }

    /// Coordinates flattened landmark-major: `x1, y1, x2, y2, ...`.
    pub fn interleaved(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Applies `f` to every point.
    pub fn map_points(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Self> {
        KeypointSet2D::new(self.0.iter().map(|&p| f(p)).collect())
    }
}

/// One depth value per keypoint. Depths are an unconstrained proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepthVector(Vec<f64>);

impl DepthVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("depths"));
        }
        Ok(DepthVector(z))
    }

    pub fn zeros(len: usize) -> Self {
        DepthVector(vec![0.0; len])
    }

    pub fn constant(len: usize, value: f64) -> Self {
        DepthVector(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Depth-augmented keypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet3D(Vec<[f64; 3]>);

impl KeypointSet3D {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("3d keypoints"));
        }
        Ok(KeypointSet3D(coords))
    }

    pub fn from_parts(xy: &KeypointSet2D, z: &DepthVector) -> Result<Self> {
        check_len("depth vector", xy.len(), z.len())?;
        Ok(KeypointSet3D(
            xy.points()
                .iter()
                .zip(z.values())
                .map(|(p, &z)| [p[0], p[1], z])
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.0
    }

    pub fn xy(&self) -> KeypointSet2D {
        KeypointSet2D(self.0.iter().map(|p| [p[0], p[1]]).collect())
    }

    pub fn depths(&self) -> DepthVector {
        DepthVector(self.0.iter().map(|p| p[2]).collect())
    }
}

/// A 2×4 map `[m1 m2 m3 tx; m4 m5 m6 ty]` from homogeneous 3D points to 2D.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub rows: [[f64; 4]; 2],
}

impl Default for AffineMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineMap {
    pub const fn identity() -> Self {
        AffineMap {
            rows: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
        }
    }

    pub fn from_rows(rows: [[f64; 4]; 2]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine map"));
        }
        Ok(AffineMap { rows })
    }

    /// Builds a map from the unknown vector of the stacked system,
    /// `[m1, m2, m3, m4, m5, m6, tx, ty]`.
    pub fn from_solution(m: &[f64; 8]) -> Self {
        AffineMap {
            rows: [[m[0], m[1], m[2], m[6]], [m[3], m[4], m[5], m[7]]],
        }
    }

    /// Inverse of [`AffineMap::from_solution`].
    pub fn solution(&self) -> [f64; 8] {
        let [r0, r1] = self.rows;
        [r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], r0[3], r1[3]]
    }

    /// Row-major order `[m1, m2, m3, tx, m4, m5, m6, ty]`, as emitted by the
    /// network's affine head.
    pub fn from_row_major(v: &[f64; 8]) -> Self {
        AffineMap {
            rows: [[v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]]],
        }
    }

    pub fn row_major(&self) -> [f64; 8] {
        let [r0, r1] = self.rows;
        [r0[0], r0[1], r0[2], r0[3], r1[0], r1[1], r1[2], r1[3]]
    }

    #[inline]
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 2] {
        let [r0, r1] = &self.rows;
        [
            r0[0] * p[0] + r0[1] * p[1] + r0[2] * p[2] + r0[3],
            r1[0] * p[0] + r1[1] * p[1] + r1[2] * p[2] + r1[3],
        ]
    }

    pub fn max_abs_diff(&self, other: &AffineMap) -> f64 {
        self.rows
            .iter()
            .flatten()
            .zip(other.rows.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The stacked `2K × 8` system and its interleaved right-hand side.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// A similarity transform `p ↦ scale · rotation · p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(p) * self.scale + self.translation;
        [q.x, q.y, q.z]
    }

    pub fn apply_all(&self, pts: &KeypointSet3D) -> KeypointSet3D {
        KeypointSet3D(pts.points().iter().map(|&p| self.apply(p)).collect())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::SizeMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

fn check_pair(src_len: usize, tgt_len: usize, min: usize) -> Result<()> {
    check_len("target keypoints", src_len, tgt_len)?;
    if src_len < min {
        return Err(Error::TooFewPoints { min, got: src_len });
    }
    Ok(())
}

/// Builds the stacked system whose least-squares solution is the affine map
/// from `src3d` to `tgt`.
pub fn build_design_matrix(src3d: &KeypointSet3D, tgt: &KeypointSet2D) -> Result<DesignMatrix> {
    check_pair(src3d.len(), tgt.len(), MIN_POINTS_3D)?;
    let k = src3d.len();
    let mut a = DMatrix::zeros(2 * k, 8);
    let mut b = DVector::zeros(2 * k);
    for (i, (p, t)) in src3d.points().iter().zip(tgt.points()).enumerate() {
        for c in 0..3 {
            a[(2 * i, c)] = p[c];
            a[(2 * i + 1, 3 + c)] = p[c];
        }
        a[(2 * i, 6)] = 1.0;
        a[(2 * i + 1, 7)] = 1.0;
        b[2 * i] = t[0];
        b[2 * i + 1] = t[1];
    }
    Ok(DesignMatrix { a, b })
}

/// `AᵀA` and `Aᵀb` accumulated directly from the points, exploiting the block
/// structure of the stacked system.
pub(crate) fn normal_equations(src3d: &[[f64; 3]], tgt: &[[f64; 2]]) -> (Matrix8, Vector8) {
    let mut outer = Matrix3::<f64>::zeros();
    let mut sum = Vector3::<f64>::zeros();
    let mut px = Vector3::<f64>::zeros();
    let mut py = Vector3::<f64>::zeros();
    let (mut tx, mut ty) = (0.0, 0.0);
    for (p, t) in src3d.iter().zip(tgt) {
        let v = Vector3::from(*p);
        outer += v * v.transpose();
        sum += v;
        px += v * t[0];
        py += v * t[1];
        tx += t[0];
        ty += t[1];
    }
    let k = src3d.len() as f64;
    let mut n = Matrix8::zeros();
    n.fixed_view_mut::<3, 3>(0, 0).copy_from(&outer);
    n.fixed_view_mut::<3, 3>(3, 3).copy_from(&outer);
    n.fixed_view_mut::<3, 1>(0, 6).copy_from(&sum);
    n.fixed_view_mut::<3, 1>(3, 7).copy_from(&sum);
    n.fixed_view_mut::<1, 3>(6, 0).copy_from(&sum.transpose());
    n.fixed_view_mut::<1, 3>(7, 3).copy_from(&sum.transpose());
    n[(6, 6)] = k;
    n[(7, 7)] = k;
    let mut c = Vector8::zeros();
    c.fixed_rows_mut::<3>(0).copy_from(&px);
    c.fixed_rows_mut::<3>(3).copy_from(&py);
    c[6] = tx;
    c[7] = ty;
    (n, c)
}

/// Absolute damping `damping · tr(AᵀA) / 8`.
pub(crate) fn absolute_damping(normal: &Matrix8, damping: f64) -> f64 {
    damping * normal.trace() / 8.0
}

/// Solves `(N + λI) m = c`. With `λ = 0` the normal matrix is checked for
/// numerical rank first.
pub(crate) fn solve_normal(normal: &Matrix8, rhs: &Vector8, lambda: f64) -> Result<Vector8> {
    if lambda == 0.0 {
        check_rank(normal)?;
    }
    let damped = normal + Matrix8::identity() * lambda;
    match damped.cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => {
            check_rank(&damped)?;
            Err(Error::Degenerate(
                "normal matrix is not positive definite".into(),
            ))
        }
    }
}

fn check_rank(normal: &Matrix8) -> Result<()> {
    let eig = SymmetricEigen::new(*normal);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    let tol = RANK_TOLERANCE * max;
    if max > 0.0 && min > tol {
        return Ok(());
    }
    let directions = (0..8)
        .filter(|&i| eig.eigenvalues[i] <= tol)
        .map(|i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    Err(Error::RankDeficient {
        directions,
        condition: if min > 0.0 { max / min } else { f64::INFINITY },
    })
}

/// Least-squares 3D-to-2D affine fit with relative Tikhonov damping.
///
/// Returns `reshape((AᵀA + damping·tr(AᵀA)/8·I)⁻¹ Aᵀb)`. With `damping == 0` a
/// numerically singular `AᵀA` is reported as [`Error::RankDeficient`].
pub fn solve_affine(src3d: &KeypointSet3D, tgt: &KeypointSet2D, damping: f64) -> Result<AffineMap> {
    check_pair(src3d.len(), tgt.len(), MIN_POINTS_3D)?;
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "damping must be >= 0, got {damping}"
        )));
    }
    let (n, c) = normal_equations(src3d.points(), tgt.points());
    let m = solve_normal(&n, &c, absolute_damping(&n, damping))?;
    Ok(AffineMap::from_solution(&m.into()))
}

/// Projects every point through `map`, dropping the transformed depth.
pub fn apply_affine(map: &AffineMap, src3d: &KeypointSet3D) -> KeypointSet2D {
    KeypointSet2D(src3d.points().iter().map(|&p| map.apply_point(p)).collect())
}

/// Reprojection loss: sum over keypoints of squared residual norms.
pub fn reprojection_loss(map: &AffineMap, src3d: &KeypointSet3D, tgt: &KeypointSet2D) -> f64 {
    src3d
        .points()
        .iter()
        .zip(tgt.points())
        .map(|(&p, t)| {
            let q = map.apply_point(p);
            (t[0] - q[0]).powi(2) + (t[1] - q[1]).powi(2)
        })
        .sum()
}

/// Least-squares 2D affine registration (`m3 = m6 = 0`).
pub fn solve_affine_2d(src: &KeypointSet2D, tgt: &KeypointSet2D) -> Result<AffineMap> {
    check_pair(src.len(), tgt.len(), MIN_POINTS_2D)?;
    let mut g = Matrix3::<f64>::zeros();
    let mut cx = Vector3::<f64>::zeros();
    let mut cy = Vector3::<f64>::zeros();
    for (p, t) in src.points().iter().zip(tgt.points()) {
        let q = Vector3::new(p[0], p[1], 1.0);
        g += q * q.transpose();
        cx += q * t[0];
        cy += q * t[1];
    }
    let eig = SymmetricEigen::new(g);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if !(min > RANK_TOLERANCE * max) {
        let directions = (0..3)
            .filter(|&i| eig.eigenvalues[i] <= RANK_TOLERANCE * max)
            .map(|i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect();
        return Err(Error::RankDeficient {
            directions,
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    let ch = g
        .cholesky()
        .ok_or_else(|| Error::Degenerate("collinear source points".into()))?;
    let rx = ch.solve(&cx);
    let ry = ch.solve(&cy);
    Ok(AffineMap {
        rows: [[rx[0], rx[1], 0.0, rx[2]], [ry[0], ry[1], 0.0, ry[2]]],
    })
}

fn centroid(pts: &[[f64; 3]]) -> Vector3<f64> {
    pts.iter().map(|&p| Vector3::from(p)).sum::<Vector3<f64>>() / pts.len() as f64
}

/// Least-squares similarity alignment of `template3d` onto `target3d`, with the
/// rotation restricted to det = +1.
pub fn procrustes(
    template3d: &KeypointSet3D,
    target3d: &KeypointSet3D,
) -> Result<SimilarityTransform> {
    check_len("procrustes target", template3d.len(), target3d.len())?;
    if template3d.len() < 3 {
        return Err(Error::TooFewPoints {
            min: 3,
            got: template3d.len(),
        });
    }
    let (src, dst) = (template3d.points(), target3d.points());
    let mu_src = centroid(src);
    let mu_dst = centroid(dst);
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_src = 0.0;
    let mut var_dst = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let s = Vector3::from(*s) - mu_src;
        let d = Vector3::from(*d) - mu_dst;
        cov += d * s.transpose();
        var_src += s.norm_squared();
        var_dst += d.norm_squared();
    }
    if var_src <= 0.0 || var_dst <= 0.0 {
        return Err(Error::Degenerate(
            "procrustes input has zero centered norm".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        // nalgebra orders singular values descending; flip the smallest.
        signs[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.component_mul(&signs).sum() / var_src;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("procrustes scale is not positive".into()));
    }
    let translation = mu_dst - rotation * mu_src * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Similarity alignment of a 3D template to 2D observations, weighting only
/// the x and y residuals.
///
/// Starts from a full 3D Procrustes fit against the `(x, y, 0)` lift of `src`
/// and then alternates: the observation depths are replaced by the aligned
/// template depths, and the fit is repeated. Each round cannot increase the
/// x/y residual.
pub fn procrustes_xy(
    template3d: &KeypointSet3D,
    src: &KeypointSet2D,
) -> Result<SimilarityTransform> {
    const MAX_ROUNDS: usize = 500;
    check_len("procrustes source", template3d.len(), src.len())?;
    let mut lifted: Vec<[f64; 3]> = src.points().iter().map(|p| [p[0], p[1], 0.0]).collect();
    let mut best = procrustes(template3d, &KeypointSet3D(lifted.clone()))?;
    let mut prev = f64::INFINITY;
    for _ in 0..MAX_ROUNDS {
        let aligned = best.apply_all(template3d);
        let err: f64 = aligned
            .points()
            .iter()
            .zip(src.points())
            .map(|(a, s)| (a[0] - s[0]).powi(2) + (a[1] - s[1]).powi(2))
            .sum();
        if prev - err <= 1e-14 * prev.max(1e-300) {
            break;
        }
        prev = err;
        for (l, a) in lifted.iter_mut().zip(aligned.points()) {
            l[2] = a[2];
        }
        best = procrustes(template3d, &KeypointSet3D(lifted.clone()))?;
    }
    Ok(best)
}

/// Output of the template registration baseline.
#[derive(Clone, Debug)]
pub struct TemplateFit {
    /// Source points projected into the target view.
    pub normalized: KeypointSet2D,
    /// Sum over keypoints of squared residual norms.
    pub loss: f64,
    /// Depths adopted from the aligned template.
    pub depths: DepthVector,
    pub map: AffineMap,
}

/// Registration baseline using a fixed 3D template: the template is aligned to
/// the source (x/y only), its aligned depths are attached to the source
/// points, and a 3D-to-2D affine map to the target is solved on the result.
pub fn template_baseline_fit(
    template3d: &KeypointSet3D,
    src: &KeypointSet2D,
    tgt: &KeypointSet2D,
    damping: f64,
) -> Result<TemplateFit> {
    check_pair(src.len(), tgt.len(), MIN_POINTS_3D)?;
    check_len("template", src.len(), template3d.len())?;
    let sim = procrustes_xy(template3d, src)?;
    let depths = sim.apply_all(template3d).depths();
    let face = KeypointSet3D::from_parts(src, &depths)?;
    let map = solve_affine(&face, tgt, damping)?;
    Ok(TemplateFit {
        normalized: apply_affine(&map, &face),
        loss: reprojection_loss(&map, &face, tgt),
        depths,
        map,
    })
}
