//! Reprojection loss evaluated at the closed-form least-squares map, and its
//! exact derivative with respect to the depths.
//!
//! With `N = AᵀA + λI`, `m = N⁻¹Aᵀb` and `r = b − Am`, the loss is `‖r‖²`.
//! Depths enter `A` only, in columns 3 and 6. Differentiating both the solve
//! and the transformed point gives
//!
//! ```text
//! dL = −2 rᵀ dA (m + w) + 2 (A w)ᵀ dA m,    w = N⁻¹Aᵀr = λ N⁻¹ m
//! ```
//!
//! so the solve contributes only through `w`, which vanishes as `λ → 0`.
//! The damping `λ = damping · tr(AᵀA) / 8` also depends on the depths, with
//! `∂L/∂λ = 2 mᵀw`.

use crate::error::{Error, Result};
use crate::geometry::{
    absolute_damping, normal_equations, solve_normal, AffineMap, DepthVector, KeypointSet2D,
    KeypointSet3D, MIN_POINTS_3D,
};

/// Loss and gradient of the closed-form structured loss.
#[derive(Clone, Debug)]
pub struct StructuredLossResult {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    pub fitted_map: AffineMap,
    pub normalized: KeypointSet2D,
}

/// Loss and gradients of the reprojection loss under an explicit map.
#[derive(Clone, Debug)]
pub struct ExplicitLossResult {
    pub loss: f64,
    /// `∂L/∂map`, laid out like [`AffineMap::rows`].
    pub grad_map: [[f64; 4]; 2],
    pub grad_z: Vec<f64>,
}

fn check_inputs(z: &DepthVector, src: &KeypointSet2D, tgt: &KeypointSet2D) -> Result<()> {
    if src.len() != tgt.len() || src.len() != z.len() {
        return Err(Error::SizeMismatch {
            what: "structured loss inputs",
            expected: src.len(),
            got: if src.len() != tgt.len() {
                tgt.len()
            } else {
                z.len()
            },
        });
    }
    if src.len() < MIN_POINTS_3D {
        return Err(Error::TooFewPoints {
            min: MIN_POINTS_3D,
            got: src.len(),
        });
    }
    Ok(())
}

/// Reprojection loss at the damped least-squares map, with `∂L/∂z`.
pub fn structured_loss(
    z: &DepthVector,
    src: &KeypointSet2D,
    tgt: &KeypointSet2D,
    damping: f64,
) -> Result<StructuredLossResult> {
    check_inputs(z, src, tgt)?;
    let pts = KeypointSet3D::from_parts(src, z)?;
    let (n, c) = normal_equations(pts.points(), tgt.points());
    let lambda = absolute_damping(&n, damping);
    let m = solve_normal(&n, &c, lambda)?;
    let map = AffineMap::from_solution(&m.into());

    let k = src.len();
    let mut resid = Vec::with_capacity(k);
    let mut loss = 0.0;
    let mut normalized = Vec::with_capacity(k);
    for (&p, t) in pts.points().iter().zip(tgt.points()) {
        let q = map.apply_point(p);
        let r = [t[0] - q[0], t[1] - q[1]];
        loss += r[0] * r[0] + r[1] * r[1];
        resid.push(r);
        normalized.push(q);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("structured loss"));
    }

    let (m3, m6) = (m[2], m[5]);
    let mut grad_z = Vec::with_capacity(k);
    if lambda == 0.0 {
        for r in &resid {
            grad_z.push(-2.0 * (r[0] * m3 + r[1] * m6));
        }
    } else {
        // Aᵀr = λm at the damped solution, so w = λ N⁻¹ m.
        let w = solve_normal(&n, &(m * lambda), lambda)?;
        let aw = AffineMap::from_solution(&w.into());
        let (w3, w6) = (w[2], w[5]);
        // λ grows with tr(AᵀA), which holds 2 z_i² per keypoint.
        let dl_dlambda = 2.0 * m.dot(&w);
        for (r, &p) in resid.iter().zip(pts.points()) {
            let q = aw.apply_point(p);
            grad_z.push(
                -2.0 * (r[0] * (m3 + w3) + r[1] * (m6 + w6))
                    + 2.0 * (q[0] * m3 + q[1] * m6)
                    + dl_dlambda * damping * p[2] / 2.0,
            );
        }
    }

    Ok(StructuredLossResult {
        loss,
        grad_z,
        fitted_map: map,
        normalized: KeypointSet2D::new(normalized)?,
    })
}

/// Central-difference estimate of `∂L/∂z` for [`structured_loss`].
pub fn finite_diff_grad(
    z: &DepthVector,
    src: &KeypointSet2D,
    tgt: &KeypointSet2D,
    damping: f64,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be > 0, got {step}"
        )));
    }
    check_inputs(z, src, tgt)?;
    let mut probe = z.values().to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = structured_loss(&DepthVector::new(probe.clone())?, src, tgt, damping)?.loss;
        probe[i] = orig - step;
        let down = structured_loss(&DepthVector::new(probe.clone())?, src, tgt, damping)?.loss;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Reprojection loss with an explicitly given map, with gradients for both
/// the map entries and the depths.
pub fn eq1_loss(
    map: &AffineMap,
    z: &DepthVector,
    src: &KeypointSet2D,
    tgt: &KeypointSet2D,
) -> Result<ExplicitLossResult> {
    if src.len() != tgt.len() || src.len() != z.len() {
        return Err(Error::SizeMismatch {
            what: "reprojection loss inputs",
            expected: src.len(),
            got: if src.len() != tgt.len() {
                tgt.len()
            } else {
                z.len()
            },
        });
    }
    let mut loss = 0.0;
    let mut grad_map = [[0.0; 4]; 2];
    let mut grad_z = Vec::with_capacity(z.len());
    let [row0, row1] = map.rows;
    for ((s, t), &zi) in src.points().iter().zip(tgt.points()).zip(z.values()) {
        let p = [s[0], s[1], zi, 1.0];
        let q = map.apply_point([s[0], s[1], zi]);
        let r = [t[0] - q[0], t[1] - q[1]];
        loss += r[0] * r[0] + r[1] * r[1];
        for c in 0..4 {
            grad_map[0][c] -= 2.0 * r[0] * p[c];
            grad_map[1][c] -= 2.0 * r[1] * p[c];
        }
        grad_z.push(-2.0 * (r[0] * row0[2] + r[1] * row1[2]));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("reprojection loss"));
    }
    Ok(ExplicitLossResult {
        loss,
        grad_map,
        grad_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_affine, solve_affine, DEFAULT_DAMPING};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        k: usize,
    ) -> (DepthVector, KeypointSet2D, KeypointSet2D) {
        let src =
            KeypointSet2D::new((0..k).map(|_| [rng.random(), rng.random()]).collect()).unwrap();
        let tgt =
            KeypointSet2D::new((0..k).map(|_| [rng.random(), rng.random()]).collect()).unwrap();
        let z = DepthVector::new((0..k).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        (z, src, tgt)
    }

    #[test]
    fn fitted_map_matches_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (z, src, tgt) = random_instance(&mut rng, 30);
        let res = structured_loss(&z, &src, &tgt, DEFAULT_DAMPING).unwrap();
        let pts = KeypointSet3D::from_parts(&src, &z).unwrap();
        let m = solve_affine(&pts, &tgt, DEFAULT_DAMPING).unwrap();
        assert!(res.fitted_map.max_abs_diff(&m) < 1e-12);
        assert_eq!(res.normalized, apply_affine(&res.fitted_map, &pts));
    }

    #[test]
    fn zero_loss_at_generating_depths() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (z, src, _) = random_instance(&mut rng, 20);
        let truth = AffineMap::from_rows([[0.9, 0.1, 0.4, 0.05], [-0.2, 1.1, 0.3, -0.02]]).unwrap();
        let tgt = apply_affine(&truth, &KeypointSet3D::from_parts(&src, &z).unwrap());
        let res = structured_loss(&z, &src, &tgt, 0.0).unwrap();
        assert!(res.loss < 1e-18, "{}", res.loss);
        assert!(res.fitted_map.max_abs_diff(&truth) < 1e-10);
        let fd = finite_diff_grad(&z, &src, &tgt, 0.0, 1e-5).unwrap();
        assert!(fd.iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn explicit_loss_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, src, _) = random_instance(&mut rng, 10);
        let res = eq1_loss(&AffineMap::identity(), &DepthVector::zeros(10), &src, &src).unwrap();
        assert_eq!(res.loss, 0.0);
        assert!(res.grad_z.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn explicit_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..10 {
            let (z, src, tgt) = random_instance(&mut rng, 12);
            let mut rm = [0.0; 8];
            for v in rm.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let map = AffineMap::from_row_major(&rm);
            let res = eq1_loss(&map, &z, &src, &tgt).unwrap();
            for j in 0..8 {
                let mut up = rm;
                up[j] += h;
                let mut dn = rm;
                dn[j] -= h;
                let fd = (eq1_loss(&AffineMap::from_row_major(&up), &z, &src, &tgt)
                    .unwrap()
                    .loss
                    - eq1_loss(&AffineMap::from_row_major(&dn), &z, &src, &tgt)
                        .unwrap()
                        .loss)
                    / (2.0 * h);
                let an = res.grad_map[j / 4][j % 4];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6));
            }
            for i in 0..12 {
                let mut up = z.values().to_vec();
                up[i] += h;
                let mut dn = z.values().to_vec();
                dn[i] -= h;
                let fd = (eq1_loss(&map, &DepthVector::new(up).unwrap(), &src, &tgt)
                    .unwrap()
                    .loss
                    - eq1_loss(&map, &DepthVector::new(dn).unwrap(), &src, &tgt)
                        .unwrap()
                        .loss)
                    / (2.0 * h);
                let an = res.grad_z[i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn finite_diff_error_shrinks_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (z, src, tgt) = random_instance(&mut rng, 8);
        let an = structured_loss(&z, &src, &tgt, 1e-4).unwrap().grad_z;
        let err = |h: f64| {
            finite_diff_grad(&z, &src, &tgt, 1e-4, h)
                .unwrap()
                .iter()
                .zip(&an)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, src, tgt) = random_instance(&mut rng, 6);
        assert!(finite_diff_grad(&z, &src, &tgt, 1e-8, 0.0).is_err());
    }
}
