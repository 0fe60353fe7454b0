//! Keypoint transfer error and depth-correlation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthVector, KeypointSet2D};
use crate::synth::PairSample;

/// Dataset-level evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// `None` when the layout has no eye landmarks.
    pub mse_norm: Option<f64>,
    pub depth_corr: Option<f64>,
    pub per_keypoint_corr: Option<Vec<f64>>,
    pub per_pair_mse: Vec<f64>,
    pub count: usize,
}

fn check_same(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::SizeMismatch {
            what: "keypoint sets",
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// Mean over all `2K` coordinates of the squared error.
pub fn mse(pred: &KeypointSet2D, tgt: &KeypointSet2D) -> Result<f64> {
    check_same(tgt.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty keypoint set".into()));
    }
    let sum: f64 = pred
        .points()
        .iter()
        .zip(tgt.points())
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok(sum / (2 * pred.len()) as f64)
}

fn landmark_center(pts: &KeypointSet2D, idx: &[usize]) -> Result<[f64; 2]> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty eye landmark list".into()));
    }
    let mut c = [0.0; 2];
    for &i in idx {
        let p = pts
            .points()
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("eye landmark {i} out of range")))?;
        c[0] += p[0];
        c[1] += p[1];
    }
    let n = idx.len() as f64;
    Ok([c[0] / n, c[1] / n])
}

/// Distance between the two eye centers, each the mean of its landmarks.
pub fn inter_ocular(pts: &KeypointSet2D, left_eye: &[usize], right_eye: &[usize]) -> Result<f64> {
    let l = landmark_center(pts, left_eye)?;
    let r = landmark_center(pts, right_eye)?;
    Ok(((l[0] - r[0]).powi(2) + (l[1] - r[1]).powi(2)).sqrt())
}

/// [`mse`] divided by the squared inter-ocular distance of the target.
pub fn mse_norm(
    pred: &KeypointSet2D,
    tgt: &KeypointSet2D,
    left_eye: &[usize],
    right_eye: &[usize],
) -> Result<f64> {
    let d = inter_ocular(tgt, left_eye, right_eye)?;
    if !(d > 0.0) {
        return Err(Error::Degenerate("coincident eye centers".into()));
    }
    Ok(mse(pred, tgt)? / (d * d))
}

/// Pearson correlation; zero variance in either series is an error.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same(a.len(), b.len())?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::Degenerate("zero variance in correlation".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-keypoint Pearson correlation across samples between predicted and
/// ground-truth depth. Returns `Σ_k |r_k|` and the vector `r`.
pub fn depth_corr(pred: &[DepthVector], gt: &[DepthVector]) -> Result<(f64, Vec<f64>)> {
    check_same(gt.len(), pred.len())?;
    if pred.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "depth correlation needs at least 3 samples, got {}",
            pred.len()
        )));
    }
    let k = gt[0].len();
    for (p, g) in pred.iter().zip(gt) {
        check_same(k, p.len())?;
        check_same(k, g.len())?;
    }
    let mut r = Vec::with_capacity(k);
    let (mut ps, mut gs) = (
        Vec::with_capacity(pred.len()),
        Vec::with_capacity(pred.len()),
    );
    for i in 0..k {
        ps.clear();
        gs.clear();
        ps.extend(pred.iter().map(|p| p.values()[i]));
        gs.extend(gt.iter().map(|g| g.values()[i]));
        r.push(pearson(&ps, &gs).map_err(|_| {
            Error::Degenerate(format!(
                "keypoint {i} has zero depth variance across samples"
            ))
        })?);
    }
    Ok((r.iter().map(|v| v.abs()).sum(), r))
}

/// Joint histogram of (ground-truth, predicted) depth pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthHeatmap {
    pub bins: usize,
    pub gt_range: [f64; 2],
    pub pred_range: [f64; 2],
    /// `counts[pred_bin][gt_bin]`.
    pub counts: Vec<Vec<u64>>,
}

impl DepthHeatmap {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn edges(range: [f64; 2], bins: usize, i: usize) -> (f64, f64) {
        let w = (range[1] - range[0]) / bins as f64;
        (range[0] + w * i as f64, range[0] + w * (i + 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("gt_bin_low,gt_bin_high,pred_bin_low,pred_bin_high,count\n");
        for (pi, row) in self.counts.iter().enumerate() {
            let (pl, ph) = Self::edges(self.pred_range, self.bins, pi);
            for (gi, c) in row.iter().enumerate() {
                let (gl, gh) = Self::edges(self.gt_range, self.bins, gi);
                s.push_str(&format!("{gl},{gh},{pl},{ph},{c}\n"));
            }
        }
        s
    }
}

fn value_range<'a>(vs: impl Iterator<Item = &'a DepthVector>) -> [f64; 2] {
    let mut r = [f64::INFINITY, f64::NEG_INFINITY];
    for v in vs.flat_map(|d| d.values()) {
        r[0] = r[0].min(*v);
        r[1] = r[1].max(*v);
    }
    r
}

fn bin_of(v: f64, range: [f64; 2], bins: usize) -> usize {
    let w = range[1] - range[0];
    if w <= 0.0 {
        return 0;
    }
    (((v - range[0]) / w * bins as f64) as usize).min(bins - 1)
}

/// Histograms every keypoint depth of every sample. Each axis spans the
/// observed range of its own values.
pub fn export_depth_heatmap(
    pred: &[DepthVector],
    gt: &[DepthVector],
    bins: usize,
) -> Result<DepthHeatmap> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no depths to histogram".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(
            "heatmap needs at least 2 bins".into(),
        ));
    }
    check_same(gt.len(), pred.len())?;
    for (p, g) in pred.iter().zip(gt) {
        check_same(g.len(), p.len())?;
    }
    let gt_range = value_range(gt.iter());
    let pred_range = value_range(pred.iter());
    let mut counts = vec![vec![0u64; bins]; bins];
    for (p, g) in pred.iter().zip(gt) {
        for (&pv, &gv) in p.values().iter().zip(g.values()) {
            counts[bin_of(pv, pred_range, bins)][bin_of(gv, gt_range, bins)] += 1;
        }
    }
    Ok(DepthHeatmap {
        bins,
        gt_range,
        pred_range,
        counts,
    })
}

/// Builds a report from per-pair predictions.
///
/// `depths`, when given, must align with `samples`, and every sample must
/// then carry a ground-truth depth.
pub fn evaluate(
    samples: &[PairSample],
    predictions: &[KeypointSet2D],
    depths: Option<&[DepthVector]>,
    eyes: Option<(&[usize], &[usize])>,
) -> Result<MetricsReport> {
    check_same(samples.len(), predictions.len())?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let per_pair_mse = samples
        .iter()
        .zip(predictions)
        .map(|(s, p)| mse(p, &s.tgt))
        .collect::<Result<Vec<_>>>()?;
    let count = samples.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mse_norm = match eyes {
        Some((l, r)) => {
            let v = samples
                .iter()
                .zip(predictions)
                .map(|(s, p)| mse_norm(p, &s.tgt, l, r))
                .collect::<Result<Vec<_>>>()?;
            Some(mean(&v))
        }
        None => None,
    };
    let (depth_corr, per_keypoint_corr) = match depths {
        Some(d) => {
            check_same(count, d.len())?;
            let gt = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    s.gt_depth.clone().ok_or_else(|| {
                        Error::InvalidArgument(format!("sample {i} has no ground-truth depth"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (total, r) = depth_corr(d, &gt)?;
            (Some(total), Some(r))
        }
        None => (None, None),
    };
    Ok(MetricsReport {
        mse: mean(&per_pair_mse),
        mse_norm,
        depth_corr,
        per_keypoint_corr,
        per_pair_mse,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, k: usize) -> KeypointSet2D {
        KeypointSet2D::new((0..k).map(|_| [rng.random(), rng.random()]).collect()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_set(&mut rng, 20);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let shifted = t.map_points(|p| [p[0] + 0.1, p[1]]).unwrap();
        assert!((mse(&shifted, &t).unwrap() - 0.005).abs() < 1e-15);
        let p = random_set(&mut rng, 20);
        let mut naive = 0.0;
        for i in 0..20 {
            for c in 0..2 {
                naive += (p.points()[i][c] - t.points()[i][c]).powi(2);
            }
        }
        naive /= 40.0;
        assert!((mse(&p, &t).unwrap() - naive).abs() < 1e-15);
        assert!(mse(&p, &random_set(&mut rng, 19)).is_err());
    }

    #[test]
    fn mse_norm_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_set(&mut rng, 68);
        let p = random_set(&mut rng, 68);
        let (l, r) = (&[42, 43, 44, 45, 46, 47][..], &[36, 37, 38, 39, 40, 41][..]);
        assert_eq!(mse_norm(&t, &t, l, r).unwrap(), 0.0);
        let a = mse_norm(&p, &t, l, r).unwrap();
        let dbl = |s: &KeypointSet2D| s.map_points(|q| [2.0 * q[0], 2.0 * q[1]]).unwrap();
        let b = mse_norm(&dbl(&p), &dbl(&t), l, r).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
        let d = inter_ocular(&t, l, r).unwrap();
        assert!((a - mse(&p, &t).unwrap() / (d * d)).abs() < 1e-15 * a.max(1.0));
        let same = KeypointSet2D::new(vec![[0.5, 0.5]; 68]).unwrap();
        assert!(mse_norm(&p, &same, l, r).is_err());
    }

    #[test]
    fn depth_corr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<DepthVector> = (0..20)
            .map(|_| DepthVector::new((0..66).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let (total, r) = depth_corr(&gt, &gt).unwrap();
        assert!((total - 66.0).abs() < 1e-9);
        assert_eq!(r.len(), 66);
        let neg: Vec<DepthVector> = gt
            .iter()
            .map(|d| DepthVector::new(d.values().iter().map(|v| -v).collect()).unwrap())
            .collect();
        let (total, r) = depth_corr(&neg, &gt).unwrap();
        assert!((total - 66.0).abs() < 1e-9);
        assert!(r.iter().all(|&v| v < 0.0));
        assert!(depth_corr(&gt[..2], &gt[..2]).is_err());
        let flat = vec![DepthVector::zeros(66); 20];
        assert!(matches!(depth_corr(&flat, &gt), Err(Error::Degenerate(_))));
    }

    #[test]
    fn heatmap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<DepthVector> = (0..30)
            .map(|_| {
                DepthVector::new((0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let h = export_depth_heatmap(&gt, &gt, 8).unwrap();
        assert_eq!(h.total(), 300);
        for (i, row) in h.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(c, 0);
                }
            }
        }
        let constant = vec![DepthVector::constant(10, 0.3); 30];
        let h = export_depth_heatmap(&constant, &gt, 8).unwrap();
        assert_eq!(
            h.counts
                .iter()
                .filter(|row| row.iter().any(|&c| c > 0))
                .count(),
            1
        );
        assert_eq!(h.total(), 300);
        let csv = h.to_csv();
        assert!(csv.starts_with("gt_bin_low,gt_bin_high,pred_bin_low,pred_bin_high,count\n"));
        assert_eq!(csv.lines().count(), 1 + 64);
        assert!(export_depth_heatmap(&[], &[], 8).is_err());
        assert!(export_depth_heatmap(&gt, &gt, 1).is_err());
    }
}
