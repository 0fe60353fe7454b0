//! Synthetic paired-keypoint scenes: a rigid 3D template seen under two random
//! similarity poses and projected orthographically.
//!
//! Conventions: x to the right, y down, the camera looks along +z so larger z
//! is farther away. A projected point is placed in normalized crop
//! coordinates as `0.5 + CROP_SCALE · s · (R X) + t`, and its depth is
//! `CROP_SCALE · s · (R X)_z`, so source and target views are related by an
//! exact 3D-to-2D affine map.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{AffineMap, DepthVector, KeypointSet2D, KeypointSet3D};

/// Normalized crop units per template unit at scale 1.
pub const CROP_SCALE: f64 = 0.4;

/// Landmark indices of the two eye rings in the 68-point layout.
pub const RIGHT_EYE_68: [usize; 6] = [36, 37, 38, 39, 40, 41];
pub const LEFT_EYE_68: [usize; 6] = [42, 43, 44, 45, 46, 47];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTemplate {
    pub name: String,
    pub points3d: KeypointSet3D,
}

impl SceneTemplate {
    pub fn new(name: impl Into<String>, points3d: KeypointSet3D) -> Result<Self> {
        if points3d.len() < 4 {
            return Err(Error::TooFewPoints {
                min: 4,
                got: points3d.len(),
            });
        }
        let pts = points3d.points();
        let mean = pts.iter().map(|&p| Vector3::from(p)).sum::<Vector3<f64>>() / pts.len() as f64;
        let mut scatter = Matrix3::zeros();
        for &p in pts {
            let d = Vector3::from(p) - mean;
            scatter += d * d.transpose();
        }
        let sv = scatter.singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            return Err(Error::Degenerate(
                "template points are not spread in 3D".into(),
            ));
        }
        Ok(SceneTemplate {
            name: name.into(),
            points3d,
        })
    }

    pub fn len(&self) -> usize {
        self.points3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3d.is_empty()
    }

    /// Looks up a built-in template by name: `face68` or `cloud<K>` (a seeded
    /// Gaussian cloud, seed 0).
    pub fn by_name(name: &str) -> Result<Self> {
        if name == "face68" {
            return Ok(face68());
        }
        if let Some(k) = name.strip_prefix("cloud").and_then(|k| k.parse().ok()) {
            return gaussian_cloud(k, 0);
        }
        Err(Error::InvalidArgument(format!("unknown template '{name}'")))
    }

    /// Eye-ring landmark indices, when the layout has eyes.
    pub fn eye_rings(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        (self.name == "face68").then(|| (LEFT_EYE_68.to_vec(), RIGHT_EYE_68.to_vec()))
    }
}

fn ring(center: [f64; 3], radii: [f64; 2], n: usize, depth_curve: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let t = std::f64::consts::PI * (1.0 - 2.0 * i as f64 / n as f64);
            let (s, c) = t.sin_cos();
            [
                center[0] - radii[0] * c,
                center[1] - radii[1] * s,
                center[2] + depth_curve * c * c,
            ]
        })
        .collect()
}

/// A coarse 68-point face in the usual landmark order: jaw (0–16), brows
/// (17–26), nose ridge (27–30), nostrils (31–35), eyes (36–47), outer and
/// inner lips (48–67). Width ≈ 1, depth range ≈ 0.3, centered at the origin.
pub fn face68() -> SceneTemplate {
    use std::f64::consts::PI;
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(68);
    for i in 0..17 {
        let t = PI * i as f64 / 16.0;
        let c = t.cos();
        pts.push([-0.5 * c, -0.05 + 0.55 * t.sin(), 0.05 + 0.25 * c * c]);
    }
    for side in [-1.0, 1.0] {
        for j in 0..5 {
            let f = j as f64 / 4.0;
            let x = if side < 0.0 {
                -0.4 + 0.3 * f
            } else {
                0.1 + 0.3 * f
            };
            pts.push([x, -0.26 - 0.05 * (PI * f).sin(), 0.04 + 0.12 * x.abs()]);
        }
    }
    for j in 0..4 {
        let f = j as f64 / 3.0;
        pts.push([0.0, -0.15 + 0.25 * f, 0.0 - 0.15 * f]);
    }
    for j in 0..5 {
        let x = -0.1 + 0.05 * j as f64;
        pts.push([x, 0.15, -0.06 + 0.4 * x.abs()]);
    }
    pts.extend(ring([-0.2, -0.12, 0.06], [0.09, 0.035], 6, 0.02));
    pts.extend(ring([0.2, -0.12, 0.06], [0.09, 0.035], 6, 0.02));
    pts.extend(ring([0.0, 0.3, 0.0], [0.2, 0.08], 12, 0.1));
    pts.extend(ring([0.0, 0.3, 0.01], [0.13, 0.03], 8, 0.06));
    debug_assert_eq!(pts.len(), 68);
    let centered = center(pts);
    SceneTemplate::new("face68", KeypointSet3D::new(centered).expect("finite"))
        .expect("face template is non-degenerate")
}

/// `k` points drawn from a seeded isotropic Gaussian (σ = 0.25), centered.
pub fn gaussian_cloud(k: usize, seed: u64) -> Result<SceneTemplate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..k)
        .map(|_| {
            let mut p = [0.0; 3];
            for v in p.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = 0.25 * n;
            }
            p
        })
        .collect();
    SceneTemplate::new(format!("cloud{k}"), KeypointSet3D::new(center(pts))?)
}

fn center(mut pts: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in &pts {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    for p in pts.iter_mut() {
        for c in 0..3 {
            p[c] -= mean[c];
        }
    }
    pts
}

/// A similarity pose. Angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Pose {
    pub const fn identity() -> Self {
        Pose {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// `R = Rz(roll) · Ry(yaw) · Rx(pitch)`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), self.roll);
        (rz * ry * rx).into_inner()
    }

    /// Places template points in the view: normalized `(x, y)` and depth.
    pub fn project(&self, template: &KeypointSet3D) -> (KeypointSet2D, DepthVector) {
        let r = self.rotation() * (CROP_SCALE * self.scale);
        let (mut xy, mut z) = (
            Vec::with_capacity(template.len()),
            Vec::with_capacity(template.len()),
        );
        for &p in template.points() {
            let q = r * Vector3::from(p);
            xy.push([0.5 + q.x + self.tx, 0.5 + q.y + self.ty]);
            z.push(q.z);
        }
        (
            KeypointSet2D::new(xy).expect("finite pose"),
            DepthVector::new(z).expect("finite pose"),
        )
    }

    fn origin(&self) -> Vector3<f64> {
        Vector3::new(0.5 + self.tx, 0.5 + self.ty, 0.0)
    }
}

/// Sampling limits for [`generate_dataset`]; each field is an inclusive
/// `[min, max]` range. Angles in radians, translation in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub yaw: [f64; 2],
    pub pitch: [f64; 2],
    pub roll: [f64; 2],
    pub scale: [f64; 2],
    pub translation: [f64; 2],
}

impl Default for PoseRange {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        PoseRange {
            yaw: [-60.0 * deg, 60.0 * deg],
            pitch: [-20.0 * deg, 20.0 * deg],
            roll: [-10.0 * deg, 10.0 * deg],
            scale: [0.8, 1.2],
            translation: [-0.1, 0.1],
        }
    }
}

impl PoseRange {
    /// A range that only ever yields the identity pose.
    pub fn fixed() -> Self {
        PoseRange {
            yaw: [0.0; 2],
            pitch: [0.0; 2],
            roll: [0.0; 2],
            scale: [1.0; 2],
            translation: [0.0; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("yaw", self.yaw),
            ("pitch", self.pitch),
            ("roll", self.roll),
            ("scale", self.scale),
            ("translation", self.translation),
        ];
        for (name, [lo, hi]) in named {
            if !(lo.is_finite() && hi.is_finite()) || hi < lo {
                return Err(Error::InvalidArgument(format!(
                    "{name} range [{lo}, {hi}] has negative extent"
                )));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::InvalidArgument(
                "scale range must be positive".into(),
            ));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Pose {
        let mut draw = |[lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        Pose {
            yaw: draw(self.yaw),
            pitch: draw(self.pitch),
            roll: draw(self.roll),
            scale: draw(self.scale),
            tx: draw(self.translation),
            ty: draw(self.translation),
        }
    }
}

/// Generating record of a synthetic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub template: String,
    pub src_pose: Pose,
    pub tgt_pose: Pose,
}

impl PairMeta {
    /// The exact 3D-to-2D map from depth-augmented source points to the target.
    pub fn generating_map(&self) -> AffineMap {
        let (s, t) = (&self.src_pose, &self.tgt_pose);
        let lin = (t.scale / s.scale) * t.rotation() * s.rotation().transpose();
        let off = t.origin() - lin * s.origin();
        AffineMap {
            rows: [
                [lin[(0, 0)], lin[(0, 1)], lin[(0, 2)], off.x],
                [lin[(1, 0)], lin[(1, 1)], lin[(1, 2)], off.y],
            ],
        }
    }

    /// Re-renders the pair from `template`.
    pub fn render(&self, template: &SceneTemplate) -> PairSample {
        let (src, gt) = self.src_pose.project(&template.points3d);
        let (tgt, _) = self.tgt_pose.project(&template.points3d);
        PairSample {
            src,
            tgt,
            gt_depth: Some(gt),
            meta: Some(self.clone()),
        }
    }
}

/// One source/target keypoint pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub src: KeypointSet2D,
    pub tgt: KeypointSet2D,
    pub gt_depth: Option<DepthVector>,
    pub meta: Option<PairMeta>,
}

impl PairSample {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Draws `count` pairs of independent poses of `template`.
pub fn generate_dataset(
    template: &SceneTemplate,
    count: usize,
    pose_range: &PoseRange,
    seed: u64,
) -> Result<Vec<PairSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    pose_range.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let meta = PairMeta {
                template: template.name.clone(),
                src_pose: pose_range.sample(&mut rng),
                tgt_pose: pose_range.sample(&mut rng),
            };
            meta.render(template)
        })
        .collect())
}

/// Coarse viewing direction of a pose, by yaw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseBucket {
    Left,
    Front,
    Right,
}

impl PoseBucket {
    /// Front within ±20° of yaw.
    pub fn of(pose: &Pose) -> Self {
        let limit = 20f64.to_radians();
        if pose.yaw < -limit {
            PoseBucket::Left
        } else if pose.yaw > limit {
            PoseBucket::Right
        } else {
            PoseBucket::Front
        }
    }
}

/// Samples whose source and target poses fall in the given buckets. Samples
/// without a generating record are dropped.
pub fn filter_by_pose(samples: &[PairSample], src: PoseBucket, tgt: PoseBucket) -> Vec<PairSample> {
    samples
        .iter()
        .filter(|s| {
            s.meta.as_ref().is_some_and(|m| {
                PoseBucket::of(&m.src_pose) == src && PoseBucket::of(&m.tgt_pose) == tgt
            })
        })
        .cloned()
        .collect()
}

/// Writes samples as JSON Lines, one pair per line.
pub fn save_dataset(samples: &[PairSample], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<PairSample>> {
    let file = fs::File::open(path)?;
    let name = path.display().to_string();
    let mut samples: Vec<PairSample> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(&line).map_err(|(field, message)| Error::Parse {
            path: name.clone(),
            line: lineno,
            field,
            message,
        })?;
        if let Some(first) = samples.first() {
            if first.len() != sample.len() {
                return Err(Error::Parse {
                    path: name,
                    line: lineno,
                    field: "src".into(),
                    message: format!(
                        "record has {} keypoints, earlier records have {}",
                        sample.len(),
                        first.len()
                    ),
                });
            }
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            path: name,
            line: 0,
            field: "-".into(),
            message: "dataset is empty".into(),
        });
    }
    Ok(samples)
}

type FieldError = (String, String);

fn field_err(field: &str, message: impl Into<String>) -> FieldError {
    (field.to_string(), message.into())
}

/// Parses `[[x, y], ...]`.
pub(crate) fn parse_points(
    v: &Value,
    field: &str,
) -> std::result::Result<KeypointSet2D, FieldError> {
    let arr = v
        .as_array()
        .ok_or_else(|| field_err(field, "expected an array of [x, y] pairs"))?;
    let mut pts = Vec::with_capacity(arr.len());
    for (i, p) in arr.iter().enumerate() {
        let pair = p
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| field_err(field, format!("entry {i} is not an [x, y] pair")))?;
        let x = pair[0].as_f64();
        let y = pair[1].as_f64();
        match (x, y) {
            (Some(x), Some(y)) => pts.push([x, y]),
            _ => {
                return Err(field_err(
                    field,
                    format!("entry {i} has a non-numeric coordinate"),
                ))
            }
        }
    }
    KeypointSet2D::new(pts).map_err(|e| field_err(field, e.to_string()))
}

fn parse_record(line: &str) -> std::result::Result<PairSample, FieldError> {
    let v: Value = serde_json::from_str(line).map_err(|e| field_err("-", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| field_err("-", "record is not a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "src" | "tgt" | "gt_depth" | "meta") {
            return Err(field_err(key, "unknown field"));
        }
    }
    let src = parse_points(
        obj.get("src").ok_or_else(|| field_err("src", "missing"))?,
        "src",
    )?;
    let tgt = parse_points(
        obj.get("tgt").ok_or_else(|| field_err("tgt", "missing"))?,
        "tgt",
    )?;
    if src.len() != tgt.len() {
        return Err(field_err(
            "tgt",
            format!("has {} keypoints, src has {}", tgt.len(), src.len()),
        ));
    }
    let gt_depth = match obj.get("gt_depth") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let z: Vec<f64> = serde_json::from_value(v.clone())
                .map_err(|e| field_err("gt_depth", e.to_string()))?;
            if z.len() != src.len() {
                return Err(field_err(
                    "gt_depth",
                    format!("has {} values, expected {}", z.len(), src.len()),
                ));
            }
            Some(DepthVector::new(z).map_err(|e| field_err("gt_depth", e.to_string()))?)
        }
    };
    let meta = match obj.get("meta") {
        None | Some(Value::Null) => None,
        Some(v) => {
            Some(serde_json::from_value(v.clone()).map_err(|e| field_err("meta", e.to_string()))?)
        }
    };
    Ok(PairSample {
        src,
        tgt,
        gt_depth,
        meta,
    })
}
