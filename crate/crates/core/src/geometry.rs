//! Box geometry and the flip / rotation / shear augmentation.
//!
//! Transforms live in pixel space so that an angle means the same thing on
//! non-square images. Boxes are moved by mapping their four corners and
//! taking the axis-aligned hull, then clipping to the (unchanged) canvas.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelfmt::BoundingBox;
use crate::rng::keyed_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("affine transform is singular (determinant {0})")]
    Singular(f64),
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn w(&self) -> f64 {
        self.width as f64
    }

    pub fn h(&self) -> f64 {
        self.height as f64
    }
}

/// Intersection over union of two boxes in the same frame. Class ids are
/// ignored; a zero-area union gives 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    // Areas from the same extents as the intersection, so iou(a, a) == 1.
    let area = |r: &BoundingBox| (r.x_max() - r.x_min()) * (r.y_max() - r.y_min());
    let union = area(a) + area(b) - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// The map `(x, y) -> (a*x + b*y + tx, c*x + d*y + ty)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Mirror about the vertical center line of an image `width` pixels wide.
    pub fn flip_horizontal(width: f64) -> Self {
        Self {
            a: -1.0,
            tx: width,
            ..Self::IDENTITY
        }
    }

    /// Rotation by `degrees` about `(cx, cy)`. Positive angles turn the image
    /// counter-clockwise as displayed (y axis pointing down).
    pub fn rotation_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self::linear_about(c, s, -s, c, cx, cy)
    }

    /// Shear about `(cx, cy)`: `x += tan(x_deg) * y`, `y += tan(y_deg) * x`
    /// relative to the center.
    pub fn shear_about(x_degrees: f64, y_degrees: f64, cx: f64, cy: f64) -> Self {
        let sx = x_degrees.to_radians().tan();
        let sy = y_degrees.to_radians().tan();
        Self::linear_about(1.0, sx, sy, 1.0, cx, cy)
    }

    fn linear_about(a: f64, b: f64, c: f64, d: f64, cx: f64, cy: f64) -> Self {
        Self {
            a,
            b,
            c,
            d,
            tx: cx - (a * cx + b * cy),
            ty: cy - (c * cx + d * cy),
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Affine2) -> Affine2 {
        let m = self;
        let n = next;
        Affine2 {
            a: n.a * m.a + n.b * m.c,
            b: n.a * m.b + n.b * m.d,
            c: n.c * m.a + n.d * m.c,
            d: n.c * m.b + n.d * m.d,
            tx: n.a * m.tx + n.b * m.ty + n.tx,
            ty: n.c * m.tx + n.d * m.ty + n.ty,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    pub fn inverse(&self) -> Result<Affine2, GeometryError> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(GeometryError::Singular(det));
        }
        let a = self.d / det;
        let b = -self.b / det;
        let c = -self.c / det;
        let d = self.a / det;
        Ok(Affine2 {
            a,
            b,
            c,
            d,
            tx: -(a * self.tx + b * self.ty),
            ty: -(c * self.tx + d * self.ty),
        })
    }

    fn ensure_invertible(&self) -> Result<(), GeometryError> {
        self.inverse().map(|_| ())
    }
}

/// Closed interval of angles in degrees, written as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct DegreeRange {
    pub min: f64,
    pub max: f64,
}

impl DegreeRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn symmetric(limit: f64) -> Self {
        Self::new(-limit, limit)
    }

    fn sample(&self, u: f64) -> f64 {
        self.min + (self.max - self.min) * u
    }

    fn largest_magnitude(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

impl From<[f64; 2]> for DegreeRange {
    fn from([min, max]: [f64; 2]) -> Self {
        Self { min, max }
    }
}

impl From<DegreeRange> for [f64; 2] {
    fn from(r: DegreeRange) -> Self {
        [r.min, r.max]
    }
}

/// Augmentation settings. Defaults: flip with probability 0.5, rotation in
/// [-15, 15] degrees, shear in [-10, 10] degrees on both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub flip_horizontal_probability: f64,
    pub rotation_range_deg: DegreeRange,
    pub shear_range_deg_x: DegreeRange,
    pub shear_range_deg_y: DegreeRange,
    pub seed: u64,
    pub copies_per_image: u32,
    /// A transformed box survives clipping only if at least this fraction of
    /// its area stays on the canvas.
    pub min_area_keep_fraction: f64,
    /// Upper bound on augmented copies per pass over the train pool. Copies
    /// are handed out round-robin over the originals.
    pub augmented_budget: Option<usize>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            flip_horizontal_probability: 0.5,
            rotation_range_deg: DegreeRange::symmetric(15.0),
            shear_range_deg_x: DegreeRange::symmetric(10.0),
            shear_range_deg_y: DegreeRange::symmetric(10.0),
            seed: 0,
            copies_per_image: 1,
            min_area_keep_fraction: 0.25,
            augmented_budget: None,
        }
    }
}

impl AugmentationSpec {
    /// A spec whose every sample is the identity.
    pub fn identity() -> Self {
        Self {
            flip_horizontal_probability: 0.0,
            rotation_range_deg: DegreeRange::new(0.0, 0.0),
            shear_range_deg_x: DegreeRange::new(0.0, 0.0),
            shear_range_deg_y: DegreeRange::new(0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidSpec(msg));
        if !(0.0..=1.0).contains(&self.flip_horizontal_probability) {
            return bad(format!(
                "flip probability {} not in [0, 1]",
                self.flip_horizontal_probability
            ));
        }
        for (name, r) in [
            ("rotation", self.rotation_range_deg),
            ("shear x", self.shear_range_deg_x),
            ("shear y", self.shear_range_deg_y),
        ] {
            if !(r.min.is_finite() && r.max.is_finite()) || r.min > r.max {
                return bad(format!("{name} range [{}, {}] is empty", r.min, r.max));
            }
            if r.min <= -90.0 || r.max >= 90.0 {
                return bad(format!("{name} range [{}, {}] leaves (-90, 90)", r.min, r.max));
            }
        }
        // The shear matrix [1 sx; sy 1] is singular when sx * sy = 1.
        let tx = self.shear_range_deg_x.largest_magnitude().to_radians().tan();
        let ty = self.shear_range_deg_y.largest_magnitude().to_radians().tan();
        if tx * ty >= 1.0 - 1e-9 {
            return bad("shear ranges can produce a singular transform".into());
        }
        if self.copies_per_image == 0 {
            return bad("copies_per_image must be at least 1".into());
        }
        if !(self.min_area_keep_fraction > 0.0 && self.min_area_keep_fraction <= 1.0) {
            return bad(format!(
                "min_area_keep_fraction {} not in (0, 1]",
                self.min_area_keep_fraction
            ));
        }
        Ok(())
    }
}

/// Draws the transform for one augmented copy: horizontal flip, then
/// rotation about the image center, then shear about the image center.
/// The result depends only on `(spec.seed, image_id, copy_index)`.
pub fn sample_affine(
    spec: &AugmentationSpec,
    dims: ImageDims,
    image_id: &str,
    copy_index: u32,
) -> Affine2 {
    let mut rng = keyed_rng("augment", spec.seed, image_id, copy_index as u64);
    // Always draw all four numbers so the stream layout never shifts.
    let flip_u: f64 = rng.random();
    let rot_u: f64 = rng.random();
    let shx_u: f64 = rng.random();
    let shy_u: f64 = rng.random();

    let (cx, cy) = (dims.w() / 2.0, dims.h() / 2.0);
    let mut t = Affine2::IDENTITY;
    if flip_u < spec.flip_horizontal_probability {
        t = t.then(&Affine2::flip_horizontal(dims.w()));
    }
    let angle = spec.rotation_range_deg.sample(rot_u);
    if angle != 0.0 {
        t = t.then(&Affine2::rotation_about(angle, cx, cy));
    }
    let shx = spec.shear_range_deg_x.sample(shx_u);
    let shy = spec.shear_range_deg_y.sample(shy_u);
    if shx != 0.0 || shy != 0.0 {
        t = t.then(&Affine2::shear_about(shx, shy, cx, cy));
    }
    t
}

/// Pixel-space image of the box center and half-extents of the transformed
/// box's axis-aligned hull. The center is mapped relative to the image
/// center, so a transform built about the image center sends a centered box
/// exactly to the center.
fn hull_center_extent(b: &BoundingBox, t: &Affine2, dims: ImageDims) -> ((f64, f64), (f64, f64)) {
    let (w, h) = (dims.w(), dims.h());
    let (icx, icy) = (w / 2.0, h / 2.0);
    // What the transform does to the image center; below 1e-9 px this is
    // rounding left over from pivoting about it.
    let (fx, fy) = t.apply(icx, icy);
    let snap = |v: f64, size: f64| if v.abs() <= 1e-9 * size { 0.0 } else { v };
    let (rx, ry) = (snap(fx - icx, w), snap(fy - icy, h));
    let (ux, uy) = (b.cx * w - icx, b.cy * h - icy);
    let center = (icx + (t.a * ux + t.b * uy + rx), icy + (t.c * ux + t.d * uy + ry));
    let (hw, hh) = (b.w * w / 2.0, b.h * h / 2.0);
    let extent = (t.a.abs() * hw + t.b.abs() * hh, t.c.abs() * hw + t.d.abs() * hh);
    (center, extent)
}

/// Pixel-space axis-aligned hull `(x0, y0, x1, y1)` of the box's corners
/// after `t`, before any clipping.
pub fn transformed_hull(b: &BoundingBox, t: &Affine2, dims: ImageDims) -> (f64, f64, f64, f64) {
    let ((mx, my), (ex, ey)) = hull_center_extent(b, t, dims);
    (mx - ex, my - ey, mx + ex, my + ey)
}

/// Moves a box through `t`. Returns `Ok(None)` when the clipped box keeps
/// less than `min_area_keep_fraction` of its transformed area or is
/// narrower than one pixel on either axis.
pub fn transform_box(
    b: &BoundingBox,
    t: &Affine2,
    dims: ImageDims,
    min_area_keep_fraction: f64,
) -> Result<Option<BoundingBox>, GeometryError> {
    t.ensure_invertible()?;
    let ((mx, my), (ex, ey)) = hull_center_extent(b, t, dims);
    // normalized (center, length) and clipped pixel length along one axis
    let axis = |m: f64, e: f64, size: f64| {
        let (lo, hi) = (m - e, m + e);
        let (clo, chi) = (lo.clamp(0.0, size), hi.clamp(0.0, size));
        if clo == lo && chi == hi {
            (m / size, 2.0 * e / size, chi - clo)
        } else {
            ((clo + chi) / 2.0 / size, (chi - clo) / size, chi - clo)
        }
    };
    let (cx, nw, cw) = axis(mx, ex, dims.w());
    let (cy, nh, ch) = axis(my, ey, dims.h());
    let full_area = 4.0 * ex * ey;
    if cw < 1.0 || ch < 1.0 || cw * ch < min_area_keep_fraction * full_area {
        return Ok(None);
    }
    Ok(Some(BoundingBox::new(b.class_id, cx, cy, nw, nh)))
}

/// Nearest-neighbour inverse-mapped resampling onto a canvas of the same
/// size. Pixels whose source falls outside the input are black.
pub fn resample_raster(image: &RgbImage, t: &Affine2) -> Result<RgbImage, GeometryError> {
    let inv = t.inverse()?;
    let (w, h) = image.dimensions();
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
        let (fx, fy) = (sx.floor(), sy.floor());
        *px = if fx >= 0.0 && fy >= 0.0 && fx < w as f64 && fy < h as f64 {
            *image.get_pixel(fx as u32, fy as u32)
        } else {
            Rgb([0, 0, 0])
        };
    }
    Ok(out)
}
