//! Piecewise-affine image warping over a Delaunay mesh of the source keypoints.
//!
//! Triangles are drawn far-to-near with a fixed-point rasterizer (1/256 px
//! vertex grid, integer edge functions, top-left fill rule), so adjacent
//! triangles share edges without cracks or double coverage.

use std::ops::Range;
use std::path::Path;

use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rayon::prelude::*;
use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{AffineMap, DepthVector, KeypointSet2D, MIN_POINTS_2D};

/// Fixed-point subdivisions per pixel used for snapped vertex positions.
pub const SUBPIXEL: i64 = 256;

/// Snapped coordinates beyond this magnitude are rejected so that edge
/// functions stay well inside `i64`.
const MAX_FIXED: f64 = (1i64 << 29) as f64;

const BAND_ROWS: usize = 32;

/// An 8-bit RGB image stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::SizeMismatch {
                what: "pixel buffer",
                expected: 3 * width * height,
                got: pixels.len(),
            });
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(3 * width * height)
            .collect();
        Image::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates, where pixel `(i, j)`
    /// has its center at `(i + 0.5, j + 0.5)`. Lookups outside the image clamp
    /// to the nearest edge pixel.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [u8; 3] {
        let u = x - 0.5;
        let v = y - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let clamp = |c: f64, n: usize| c.clamp(0.0, (n - 1) as f64) as usize;
        let (xa, xb) = (clamp(x0, self.width), clamp(x0 + 1.0, self.width));
        let (ya, yb) = (clamp(y0, self.height), clamp(y0 + 1.0, self.height));
        let (p00, p10) = (self.get(xa, ya), self.get(xb, ya));
        let (p01, p11) = (self.get(xa, yb), self.get(xb, yb));
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            let val = top * (1.0 - fy) + bottom * fy;
            out[c] = val.round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Image::new(w as usize, h as usize, img.into_raw())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Image::from_png_bytes(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        image::codecs::png::PngEncoder::new(&mut buf)
            .write_image(
                &self.pixels,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(buf)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_png_bytes()?)
    }

    /// Binary PPM (`P6`) encoding.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.pixels);
        buf
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_ppm_bytes())
    }
}

/// Binary PGM (`P5`) encoding of a single-channel 8-bit buffer.
pub fn pgm_bytes(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::SizeMismatch {
            what: "mask buffer",
            expected: width * height,
            got: data.len(),
        });
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(data);
    Ok(buf)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_atomic(path, &pgm_bytes(width, height, data)?)
}

/// Triangles over the vertices of a keypoint set, each listed counter-clockwise
/// in source coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriangleMesh {
    pub vertex_count: usize,
    pub triangles: Vec<[usize; 3]>,
}

/// Delaunay triangulation of `points`.
///
/// Points are inserted in lexicographic `(x, y)` order, which makes the
/// result independent of the input ordering up to vertex relabelling.
/// Duplicate points collapse onto the first occurrence.
pub fn triangulate(points: &KeypointSet2D) -> Result<TriangleMesh> {
    let pts = points.points();
    if pts.len() < MIN_POINTS_2D {
        return Err(Error::TooFewPoints {
            min: MIN_POINTS_2D,
            got: pts.len(),
        });
    }
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| {
        pts[a][0]
            .total_cmp(&pts[b][0])
            .then(pts[a][1].total_cmp(&pts[b][1]))
            .then(a.cmp(&b))
    });

    let mut dt: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    let mut handle_to_index = Vec::with_capacity(pts.len());
    for &i in &order {
        let h = dt
            .insert(Point2::new(pts[i][0], pts[i][1]))
            .map_err(|e| Error::Degenerate(format!("cannot triangulate keypoint {i}: {e:?}")))?;
        if h.index() == handle_to_index.len() {
            handle_to_index.push(i);
        }
    }

    let mut triangles: Vec<[usize; 3]> = dt
        .inner_faces()
        .map(|f| f.vertices().map(|v| handle_to_index[v.fix().index()]))
        .collect();
    if triangles.is_empty() {
        return Err(Error::Degenerate("all keypoints are collinear".into()));
    }
    for t in &mut triangles {
        // Canonical rotation: smallest index first, orientation preserved.
        let k = (0..3).min_by_key(|&k| t[k]).unwrap_or(0);
        t.rotate_left(k);
    }
    triangles.sort_unstable();
    Ok(TriangleMesh {
        vertex_count: pts.len(),
        triangles,
    })
}

/// Output of [`warp_image`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Warped {
    pub image: Image,
    /// 255 where some triangle was drawn, 0 for background.
    pub mask: Vec<u8>,
    /// Triangles skipped because their target footprint has zero area.
    pub skipped: usize,
}

/// A triangle ready for rasterization in target pixel space.
struct Prepared {
    v: [[i64; 2]; 3],
    bias: [i64; 3],
    bbox: [i64; 4],
    /// Target pixel → source pixel: `[a, b, c, d, e, f]` with
    /// `sx = a·x + b·y + c`, `sy = d·x + e·y + f`.
    inv: [f64; 6],
}

fn snap(p: [f64; 2]) -> Option<[i64; 2]> {
    let x = (p[0] * SUBPIXEL as f64).round();
    let y = (p[1] * SUBPIXEL as f64).round();
    (x.abs() <= MAX_FIXED && y.abs() <= MAX_FIXED).then_some([x as i64, y as i64])
}

#[inline]
fn edge(a: [i64; 2], b: [i64; 2], p: [i64; 2]) -> i64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// With positive-area orientation in y-down pixel space, an edge is "top" when
/// horizontal and running in +x, and "left" when running upwards.
fn is_top_left(a: [i64; 2], b: [i64; 2]) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    dy < 0 || (dy == 0 && dx > 0)
}

fn prepare(tgt: [[f64; 2]; 3], src: [[f64; 2]; 3]) -> Option<Prepared> {
    let mut v = [snap(tgt[0])?, snap(tgt[1])?, snap(tgt[2])?];
    let area = edge(v[0], v[1], v[2]);
    if area == 0 {
        return None;
    }
    let (mut t, mut s) = (tgt, src);
    if area < 0 {
        v.swap(1, 2);
        t.swap(1, 2);
        s.swap(1, 2);
    }
    let bias = [
        is_top_left(v[1], v[2]) as i64,
        is_top_left(v[2], v[0]) as i64,
        is_top_left(v[0], v[1]) as i64,
    ];
    let bbox = [
        v.iter().map(|p| p[0]).min()?,
        v.iter().map(|p| p[1]).min()?,
        v.iter().map(|p| p[0]).max()?,
        v.iter().map(|p| p[1]).max()?,
    ];

    // Affine map from the unsnapped target triangle back to the source one.
    let (e1, e2) = (
        [t[1][0] - t[0][0], t[1][1] - t[0][1]],
        [t[2][0] - t[0][0], t[2][1] - t[0][1]],
    );
    let det = e1[0] * e2[1] - e1[1] * e2[0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let (f1, f2) = (
        [s[1][0] - s[0][0], s[1][1] - s[0][1]],
        [s[2][0] - s[0][0], s[2][1] - s[0][1]],
    );
    // Inverse of [e1 e2] (columns).
    let ti = [e2[1] / det, -e2[0] / det, -e1[1] / det, e1[0] / det];
    let a = f1[0] * ti[0] + f2[0] * ti[2];
    let b = f1[0] * ti[1] + f2[0] * ti[3];
    let d = f1[1] * ti[0] + f2[1] * ti[2];
    let e = f1[1] * ti[1] + f2[1] * ti[3];
    let c = s[0][0] - a * t[0][0] - b * t[0][1];
    let f = s[0][1] - d * t[0][0] - e * t[0][1];
    Some(Prepared {
        v,
        bias,
        bbox,
        inv: [a, b, c, d, e, f],
    })
}

/// Calls `plot(x, y)` for every pixel of `rows` whose center the triangle covers.
fn rasterize(tri: &Prepared, rows: Range<usize>, width: usize, mut plot: impl FnMut(usize, usize)) {
    let half = SUBPIXEL / 2;
    // Pixel j has its center at j·S + S/2; keep centers within the bounding box.
    let first = |lo: i64| -(half - lo).div_euclid(SUBPIXEL);
    let last = |hi: i64| (hi - half).div_euclid(SUBPIXEL);
    let (first_col, first_row) = (first(tri.bbox[0]), first(tri.bbox[1]));
    let (last_col, last_row) = (last(tri.bbox[2]), last(tri.bbox[3]));

    let y0 = first_row.max(rows.start as i64);
    let y1 = last_row.min(rows.end as i64 - 1);
    let x0 = first_col.max(0);
    let x1 = last_col.min(width as i64 - 1);
    let [a, b, c] = tri.v;
    for y in y0..=y1 {
        let py = y * SUBPIXEL + half;
        for x in x0..=x1 {
            let p = [x * SUBPIXEL + half, py];
            if edge(b, c, p) + tri.bias[0] > 0
                && edge(c, a, p) + tri.bias[1] > 0
                && edge(a, b, p) + tri.bias[2] > 0
            {
                plot(x as usize, y as usize);
            }
        }
    }
}

/// Per-vertex depth after the map: the third row of the rotation-like block is
/// `r1 × r2`, which for a scaled rotation is the camera axis. Falls back to the
/// raw predicted depth when the block is rank-deficient.
fn transformed_depths(map: &AffineMap, src: &KeypointSet2D, depths: &DepthVector) -> Vec<f64> {
    let [r0, r1] = map.rows;
    let r3 = [
        r0[1] * r1[2] - r0[2] * r1[1],
        r0[2] * r1[0] - r0[0] * r1[2],
        r0[0] * r1[1] - r0[1] * r1[0],
    ];
    let n3 = r3.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n0 = r0[..3].iter().map(|v| v * v).sum::<f64>().sqrt();
    let n1 = r1[..3].iter().map(|v| v * v).sum::<f64>().sqrt();
    let usable = n3 > 1e-12 * n0 * n1 && n3.is_finite();
    src.points()
        .iter()
        .zip(depths.values())
        .map(|(p, &z)| {
            if usable {
                r3[0] * p[0] + r3[1] * p[1] + r3[2] * z
            } else {
                z
            }
        })
        .collect()
}

/// Warps `src_image` so that the keypoints `src_pts` (normalized to the unit
/// square of the source image) move to `map · (x, y, z)` in an output image of
/// `out_size = (width, height)`.
pub fn warp_image(
    src_image: &Image,
    src_pts: &KeypointSet2D,
    depths: &DepthVector,
    map: &AffineMap,
    out_size: (usize, usize),
) -> Result<Warped> {
    let k = src_pts.len();
    if depths.len() != k {
        return Err(Error::SizeMismatch {
            what: "depth vector",
            expected: k,
            got: depths.len(),
        });
    }
    let (ow, oh) = out_size;
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be positive, got {ow}x{oh}"
        )));
    }
    let mesh = triangulate(src_pts)?;

    let (sw, sh) = (src_image.width as f64, src_image.height as f64);
    let src_px: Vec<[f64; 2]> = src_pts
        .points()
        .iter()
        .map(|p| [p[0] * sw, p[1] * sh])
        .collect();
    let tgt_px: Vec<[f64; 2]> = src_pts
        .points()
        .iter()
        .zip(depths.values())
        .map(|(p, &z)| {
            let q = map.apply_point([p[0], p[1], z]);
            [q[0] * ow as f64, q[1] * oh as f64]
        })
        .collect();

    let vdepth = transformed_depths(map, src_pts, depths);
    let mut order: Vec<(f64, usize)> = mesh
        .triangles
        .iter()
        .enumerate()
        .map(|(i, t)| ((vdepth[t[0]] + vdepth[t[1]] + vdepth[t[2]]) / 3.0, i))
        .collect();
    // Far (larger depth) first; ties keep mesh order.
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut skipped = 0;
    let prepared: Vec<Prepared> = order
        .iter()
        .filter_map(|&(_, i)| {
            let t = mesh.triangles[i];
            let p = prepare(t.map(|j| tgt_px[j]), t.map(|j| src_px[j]));
            if p.is_none() {
                skipped += 1;
            }
            p
        })
        .collect();

    let mut pixels = vec![0u8; 3 * ow * oh];
    let mut mask = vec![0u8; ow * oh];
    pixels
        .par_chunks_mut(3 * ow * BAND_ROWS)
        .zip(mask.par_chunks_mut(ow * BAND_ROWS))
        .enumerate()
        .for_each(|(band, (pix, msk))| {
            let y_start = band * BAND_ROWS;
            let rows = y_start..(y_start + msk.len() / ow);
            for tri in &prepared {
                rasterize(tri, rows.clone(), ow, |x, y| {
                    let sx =
                        tri.inv[0] * (x as f64 + 0.5) + tri.inv[1] * (y as f64 + 0.5) + tri.inv[2];
                    let sy =
                        tri.inv[3] * (x as f64 + 0.5) + tri.inv[4] * (y as f64 + 0.5) + tri.inv[5];
                    let rgb = src_image.sample_bilinear(sx, sy);
                    let local = (y - y_start) * ow + x;
                    pix[3 * local..3 * local + 3].copy_from_slice(&rgb);
                    msk[local] = 255;
                });
            }
        });

    Ok(Warped {
        image: Image::new(ow, oh, pixels)?,
        mask,
        skipped,
    })
}

/// Number of times each pixel of a `width × height` buffer is drawn when the
/// mesh is rasterized with vertices at `pts_px` (pixel units). Returns the
/// counts and the number of zero-area triangles skipped.
pub fn coverage_counts(
    mesh: &TriangleMesh,
    pts_px: &[[f64; 2]],
    width: usize,
    height: usize,
) -> Result<(Vec<u32>, usize)> {
    if pts_px.len() != mesh.vertex_count {
        return Err(Error::SizeMismatch {
            what: "mesh vertices",
            expected: mesh.vertex_count,
            got: pts_px.len(),
        });
    }
    let mut counts = vec![0u32; width * height];
    let mut skipped = 0;
    for t in &mesh.triangles {
        let tri = t.map(|j| pts_px[j]);
        match prepare(tri, tri) {
            Some(p) => rasterize(&p, 0..height, width, |x, y| counts[y * width + x] += 1),
            None => skipped += 1,
        }
    }
    Ok((counts, skipped))
}
