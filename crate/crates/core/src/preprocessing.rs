//! Derives the training images for one sample: the cropped input, face mask,
//! face part, landmark image, foreground mask and hole mask.
//!
//! Pixel `(row, col)` has its centre at the continuous point `(x = col,
//! y = row)`; landmark coordinates use the same convention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 68;
/// Eyes, nose and mouth in the 68-point scheme (eyebrows and jaw excluded).
pub const INNER_FACE: std::ops::RangeInclusive<usize> = 27..=67;
/// Eye contours, image-left eye first.
pub const LEFT_EYE: std::ops::RangeInclusive<usize> = 36..=41;
pub const RIGHT_EYE: std::ops::RangeInclusive<usize> = 42..=47;
/// Face-mask dilation as a fraction of image width.
pub const FACE_DILATION: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("landmark coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    fn centroid(&self, range: std::ops::RangeInclusive<usize>) -> [f64; 2] {
        let n = range.clone().count() as f64;
        let (sx, sy) = self.points[range]
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }

    /// `(min_x, min_y, max_x, max_y)` over all points.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p[0]), b.min(p[1]), c.max(p[0]), d.max(p[1])),
        )
    }
}

fn mask_tensor(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_fn(&[1, h, w, 1], |i| if f(i / w, i % w) { 1.0 } else { 0.0 })
}

/// `(h, w)` of an `(1, H, W, C)` single-sample image.
pub fn image_size(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w, _] => Ok((*h, *w)),
        s => Err(Error::Shape(format!("expected a single (1, H, W, C) image, got {s:?}"))),
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain) without collinear points.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Pixels whose centres lie inside or on the convex polygon `hull`.
/// Hulls with fewer than three vertices rasterise as a point or segment.
pub fn rasterize_hull(hull: &[[f64; 2]], (h, w): (usize, usize)) -> Tensor {
    match hull.len() {
        0 => Tensor::zeros(&[1, h, w, 1]),
        1 | 2 => {
            let (a, b) = (hull[0], hull[hull.len() - 1]);
            let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
            let mut m = Tensor::zeros(&[1, h, w, 1]);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = (a[0] + t * (b[0] - a[0])).round();
                let y = (a[1] + t * (b[1] - a[1])).round();
                if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                    m.data_mut()[y as usize * w + x as usize] = 1.0;
                }
            }
            m
        }
        n => {
            // row/column bounds of the hull limit the scan
            let (min_y, max_y) = hull
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
            let r0 = min_y.ceil().max(0.0) as usize;
            let r1 = max_y.floor().min(h as f64 - 1.0);
            let mut m = Tensor::zeros(&[1, h, w, 1]);
            if r1 < 0.0 {
                return m;
            }
            for r in r0..=(r1 as usize) {
                for c in 0..w {
                    let p = [c as f64, r as f64];
                    let inside = (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0.0);
                    if inside {
                        m.data_mut()[r * w + c] = 1.0;
                    }
                }
            }
            m
        }
    }
}

/// Binary mask of the convex hull of the 41 eye/nose/mouth landmarks.
pub fn face_mask_from_landmarks(landmarks: &LandmarkSet, size: (usize, usize)) -> Result<Tensor> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::InvalidArgument(format!("image size {size:?} must be positive")));
    }
    let hull = convex_hull(&landmarks.points()[INNER_FACE]);
    Ok(rasterize_hull(&hull, size))
}

/// Square-element dilation with radius `round(fraction × W)`.
pub fn dilate_mask(mask: &Tensor, fraction: f64) -> Result<Tensor> {
    if !(fraction >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dilation fraction must be non-negative, got {fraction}"
        )));
    }
    let (h, w) = image_size(mask)?;
    let radius = (fraction * w as f64).round() as usize;
    Ok(dilate_square(mask, radius, (h, w)))
}

/// Separable max filter: rows, then columns.
fn dilate_square(mask: &Tensor, radius: usize, (h, w): (usize, usize)) -> Tensor {
    if radius == 0 {
        return mask.clone();
    }
    let src = mask.data();
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows[r * w + c] = src[r * w + lo..=r * w + hi].iter().cloned().fold(0.0, f64::max);
        }
    }
    let mut out = Tensor::zeros(&[1, h, w, 1]);
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            out.data_mut()[r * w + c] = (lo..=hi).map(|rr| rows[rr * w + c]).fold(0.0, f64::max);
        }
    }
    out
}

/// `x_real ⊙ mask`, broadcasting a single-channel mask across channels.
pub fn face_part(x_real: &Tensor, dilated_mask: &Tensor) -> Result<Tensor> {
    let (h, w) = image_size(x_real)?;
    if image_size(dilated_mask)? != (h, w) || dilated_mask.shape()[3] != 1 {
        return Err(Error::InvalidArgument(format!(
            "mask shape {:?} does not match image {:?}",
            dilated_mask.shape(),
            x_real.shape()
        )));
    }
    let c = x_real.shape()[3];
    let mut out = x_real.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= dilated_mask.data()[i / c];
    }
    Ok(out)
}

/// Filled Euclidean discs of `radius` around every landmark. The pixel
/// nearest each landmark is always set when it lies inside the image.
pub fn render_landmark_image(landmarks: &LandmarkSet, (h, w): (usize, usize), radius: f64) -> Result<Tensor> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be non-negative, got {radius}")));
    }
    let mut m = Tensor::zeros(&[1, h, w, 1]);
    let r2 = radius * radius;
    for &[x, y] in landmarks.points() {
        let (nx, ny) = (x.round(), y.round());
        if nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64 {
            m.data_mut()[ny as usize * w + nx as usize] = 1.0;
        }
        let c0 = (x - radius).ceil().max(0.0);
        let c1 = (x + radius).floor().min(w as f64 - 1.0);
        let r0 = (y - radius).ceil().max(0.0);
        let r1 = (y + radius).floor().min(h as f64 - 1.0);
        if c1 < c0 || r1 < r0 {
            continue;
        }
        for r in r0 as usize..=r1 as usize {
            for c in c0 as usize..=c1 as usize {
                let (dx, dy) = (c as f64 - x, r as f64 - y);
                if dx * dx + dy * dy <= r2 {
                    m.data_mut()[r * w + c] = 1.0;
                }
            }
        }
    }
    Ok(m)
}

/// Rectangle in fractions of image height (`top`, `height`) and width
/// (`left`, `width`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FracRect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl FracRect {
    pub fn new(top: f64, left: f64, height: f64, width: f64) -> Result<Self> {
        let r = Self { top, left, height, width };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.top, self.left, self.height, self.width];
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("rectangle fractions out of [0,1]: {self:?}")));
        }
        if self.top + self.height > 1.0 + 1e-12 || self.left + self.width > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!("rectangle exceeds the image: {self:?}")));
        }
        Ok(())
    }

    /// Half-open pixel ranges `(rows, cols)` covered at `(h, w)`.
    pub fn pixel_ranges(&self, (h, w): (usize, usize)) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r0 = (self.top * h as f64).floor() as usize;
        let c0 = (self.left * w as f64).floor() as usize;
        let r1 = (r0 + (self.height * h as f64).floor() as usize).min(h);
        let c1 = (c0 + (self.width * w as f64).floor() as usize).min(w);
        (r0..r1, c0..c1)
    }

    /// Clips a possibly out-of-range box into the unit square, preserving
    /// its size where possible.
    fn clipped(top: f64, left: f64, height: f64, width: f64) -> Self {
        let height = height.clamp(0.0, 1.0);
        let width = width.clamp(0.0, 1.0);
        Self {
            top: top.clamp(0.0, 1.0 - height),
            left: left.clamp(0.0, 1.0 - width),
            height,
            width,
        }
    }
}

/// The six landmark-anchored hole regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Left eye.
    O1,
    /// Right eye.
    O2,
    /// Upper face.
    O3,
    /// Left face.
    O4,
    /// Right face.
    O5,
    /// Lower face.
    O6,
}

impl Region {
    pub const ALL: [Region; 6] = [Region::O1, Region::O2, Region::O3, Region::O4, Region::O5, Region::O6];
}

/// Extents used to place the O1–O6 rectangles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionGeometry {
    /// Eye box size as fractions of image (height, width).
    pub eye_box: (f64, f64),
    /// Fraction of the face bounding-box height covered by O3 and O6.
    pub band_fraction: f64,
    /// Fraction of the face bounding-box width covered by O4 and O5.
    pub side_fraction: f64,
}

impl Default for RegionGeometry {
    fn default() -> Self {
        Self {
            eye_box: (0.22, 0.30),
            band_fraction: 0.45,
            side_fraction: 0.5,
        }
    }
}

impl RegionGeometry {
    /// Places `region` for a face with `landmarks` on an `(h, w)` image.
    pub fn rect(&self, region: Region, landmarks: &LandmarkSet, (h, w): (usize, usize)) -> FracRect {
        let (hf, wf) = (h as f64, w as f64);
        let eye = |range| {
            let [cx, cy] = landmarks.centroid(range);
            let (bh, bw) = self.eye_box;
            FracRect::clipped(cy / hf - bh / 2.0, cx / wf - bw / 2.0, bh, bw)
        };
        let (x0, y0, x1, y1) = landmarks.bounds();
        let (top, left) = (y0.max(0.0) / hf, x0.max(0.0) / wf);
        let bottom = (y1 + 1.0).min(hf) / hf;
        let right = (x1 + 1.0).min(wf) / wf;
        let (bh, bw) = ((bottom - top).max(0.0), (right - left).max(0.0));
        match region {
            Region::O1 => eye(LEFT_EYE),
            Region::O2 => eye(RIGHT_EYE),
            Region::O3 => FracRect::clipped(top, left, bh * self.band_fraction, bw),
            Region::O4 => FracRect::clipped(top, left, bh, bw * self.side_fraction),
            Region::O5 => FracRect::clipped(top, right - bw * self.side_fraction, bh, bw * self.side_fraction),
            Region::O6 => FracRect::clipped(bottom - bh * self.band_fraction, left, bh * self.band_fraction, bw),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HoleShape {
    Rect(FracRect),
    /// Landmark-anchored rectangle, resolved per face.
    Region(Region),
    /// Free-form binary mask at the target resolution.
    Irregular(Option<Tensor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoleSpec {
    pub shape: HoleShape,
    pub fill_value: f64,
    /// Report grouping label, e.g. `O3` or a custom name.
    pub label: String,
}

pub const DEFAULT_FILL: f64 = 1.0;

impl HoleSpec {
    pub fn rect(rect: FracRect) -> Self {
        Self {
            shape: HoleShape::Rect(rect),
            fill_value: DEFAULT_FILL,
            label: "rect".into(),
        }
    }

    pub fn region(region: Region) -> Self {
        Self {
            shape: HoleShape::Region(region),
            fill_value: DEFAULT_FILL,
            label: format!("{region:?}"),
        }
    }

    pub fn irregular(mask: Option<Tensor>, label: impl Into<String>) -> Self {
        Self {
            shape: HoleShape::Irregular(mask),
            fill_value: DEFAULT_FILL,
            label: label.into(),
        }
    }

    /// No hole at all.
    pub fn empty() -> Self {
        Self {
            shape: HoleShape::Rect(FracRect {
                top: 0.0,
                left: 0.0,
                height: 0.0,
                width: 0.0,
            }),
            fill_value: DEFAULT_FILL,
            label: "none".into(),
        }
    }

    pub fn with_fill(mut self, fill_value: f64) -> Self {
        self.fill_value = fill_value;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Binary hole mask (1 = missing) at `(h, w)`. Region holes need
    /// landmarks in target-image coordinates.
    pub fn mask(&self, size: (usize, usize), landmarks: Option<&LandmarkSet>, geometry: &RegionGeometry) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::InvalidArgument(format!(
                "fill value {} outside [0,1]",
                self.fill_value
            )));
        }
        let (h, w) = size;
        let rect_mask = |r: &FracRect| -> Result<Tensor> {
            r.validate()?;
            let (rows, cols) = r.pixel_ranges(size);
            Ok(mask_tensor(h, w, |y, x| rows.contains(&y) && cols.contains(&x)))
        };
        match &self.shape {
            HoleShape::Rect(r) => rect_mask(r),
            HoleShape::Region(region) => {
                let lm = landmarks.ok_or_else(|| {
                    Error::InvalidArgument(format!("hole region {region:?} needs landmarks"))
                })?;
                rect_mask(&geometry.rect(*region, lm, size))
            }
            HoleShape::Irregular(None) => Err(Error::InvalidArgument(format!(
                "irregular hole `{}` has no mask",
                self.label
            ))),
            HoleShape::Irregular(Some(m)) => {
                if image_size(m)? != size || m.shape()[3] != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "irregular mask {:?} does not match resolution {size:?}",
                        m.shape()
                    )));
                }
                ensure_binary(m, "irregular hole mask")?;
                Ok(m.clone())
            }
        }
    }
}

/// Parses `O1`..`O6`, `none`, `rect:top,left,height,width` or `mask:<png>`.
impl FromStr for HoleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let region = match s {
            "O1" => Some(Region::O1),
            "O2" => Some(Region::O2),
            "O3" => Some(Region::O3),
            "O4" => Some(Region::O4),
            "O5" => Some(Region::O5),
            "O6" => Some(Region::O6),
            _ => None,
        };
        if let Some(r) = region {
            return Ok(HoleSpec::region(r));
        }
        if s == "none" {
            return Ok(HoleSpec::empty());
        }
        if let Some(rest) = s.strip_prefix("rect:") {
            let v: Vec<f64> = rest
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("bad rectangle `{rest}`: {e}")))?;
            if v.len() != 4 {
                return Err(Error::InvalidArgument(format!(
                    "rectangle needs top,left,height,width; got `{rest}`"
                )));
            }
            return Ok(HoleSpec::rect(FracRect::new(v[0], v[1], v[2], v[3])?).with_label(s));
        }
        if let Some(path) = s.strip_prefix("mask:") {
            let m = crate::imageio::load_mask(std::path::Path::new(path))?;
            let label = std::path::Path::new(path)
                .file_stem()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_else(|| "irregular".into());
            return Ok(HoleSpec::irregular(Some(m), label));
        }
        Err(Error::InvalidArgument(format!(
            "unknown hole spec `{s}` (expected O1..O6, none, rect:t,l,h,w or mask:<path>)"
        )))
    }
}

impl fmt::Display for HoleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.shape {
            HoleShape::Region(r) => write!(f, "{r:?}"),
            HoleShape::Rect(r) => write!(f, "rect:{},{},{},{}", r.top, r.left, r.height, r.width),
            HoleShape::Irregular(_) => write!(f, "mask:{}", self.label),
        }
    }
}

/// Applies a precomputed hole mask: fill inside, `x_real` outside.
pub fn apply_hole_mask(x_real: &Tensor, hole_mask: &Tensor, fill_value: f64) -> Result<Tensor> {
    let (h, w) = image_size(x_real)?;
    if image_size(hole_mask)? != (h, w) {
        return Err(Error::InvalidArgument("hole mask does not match image".into()));
    }
    let c = x_real.shape()[3];
    let mut out = x_real.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if hole_mask.data()[i / c] != 0.0 {
            *v = fill_value;
        }
    }
    Ok(out)
}

/// Returns `(x_crop, hole_mask)`. Region holes are rejected here because
/// they need landmarks; use [`HoleSpec::mask`] for those.
pub fn apply_hole(x_real: &Tensor, spec: &HoleSpec) -> Result<(Tensor, Tensor)> {
    let size = image_size(x_real)?;
    let mask = spec.mask(size, None, &RegionGeometry::default())?;
    let crop = apply_hole_mask(x_real, &mask, spec.fill_value)?;
    Ok((crop, mask))
}

fn ensure_binary(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("{what} must be binary (0 or 1)")));
    }
    Ok(())
}

/// `W_FB = x_FG + γ (1 − x_FG)`.
pub fn foreground_weight_map(x_fg: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {gamma}")));
    }
    ensure_binary(x_fg, "foreground mask")?;
    Ok(x_fg.map(|f| f + gamma * (1.0 - f)))
}

/// Raw annotated input: full-resolution image, landmarks in source pixels
/// and a binary foreground mask of the same size.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub id: String,
    pub image: Tensor,
    pub landmarks: LandmarkSet,
    pub foreground: Tensor,
}

/// All derived images for one sample at the target resolution. Every tensor
/// is `(1, H, W, C)`; masks have one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBundle {
    pub id: String,
    pub label: String,
    pub x_real: Tensor,
    pub x_crop: Tensor,
    pub x_m: Tensor,
    pub x_f: Tensor,
    pub x_l: Tensor,
    pub x_fg: Tensor,
    pub hole_mask: Tensor,
    /// Landmarks in target-image coordinates.
    pub landmarks: LandmarkSet,
}

/// Options for [`build_region_bundle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleOptions {
    pub resolution: usize,
    /// Landmark disc radius in pixels at 256²; scaled with resolution.
    pub landmark_radius: f64,
    pub geometry: RegionGeometry,
}

impl BundleOptions {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            landmark_radius: 1.0,
            geometry: RegionGeometry::default(),
        }
    }
}

/// Centre-crops to a square and resizes to `resolution`, then derives every
/// bundle image.
pub fn build_region_bundle(raw: &RawSample, spec: &HoleSpec, opts: &BundleOptions) -> Result<RegionBundle> {
    let ingest = |e: Error| Error::Ingestion {
        sample: raw.id.clone(),
        message: e.to_string(),
    };
    let (h, w) = image_size(&raw.image).map_err(ingest)?;
    if image_size(&raw.foreground).map_err(ingest)? != (h, w) {
        return Err(ingest(Error::Shape(format!(
            "foreground mask {:?} does not match image {:?}",
            raw.foreground.shape(),
            raw.image.shape()
        ))));
    }
    let res = opts.resolution;
    if res == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let side = h.min(w);
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    let scale = res as f64 / side as f64;

    let image = crate::imageio::crop(&raw.image, oy, ox, side, side);
    let x_real = crate::imageio::resize_bilinear(&image, res, res);
    let fg = crate::imageio::crop(&raw.foreground, oy, ox, side, side);
    let x_fg = crate::imageio::resize_nearest(&fg, res, res).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });

    let landmarks = raw
        .landmarks
        .map(|[x, y]| [(x - ox as f64 + 0.5) * scale - 0.5, (y - oy as f64 + 0.5) * scale - 0.5]);

    let size = (res, res);
    let x_m = face_mask_from_landmarks(&landmarks, size)?;
    let dilated = dilate_mask(&x_m, FACE_DILATION)?;
    let x_f = face_part(&x_real, &dilated)?;
    let x_l = render_landmark_image(&landmarks, size, opts.landmark_radius * res as f64 / 256.0)?;
    let hole_mask = spec.mask(size, Some(&landmarks), &opts.geometry).map_err(ingest)?;
    let x_crop = apply_hole_mask(&x_real, &hole_mask, spec.fill_value)?;

    Ok(RegionBundle {
        id: raw.id.clone(),
        label: spec.label.clone(),
        x_real,
        x_crop,
        x_m,
        x_f,
        x_l,
        x_fg,
        hole_mask,
        landmarks,
    })
}

/// Bundles stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_real: Tensor,
    pub x_crop: Tensor,
    pub x_m: Tensor,
    pub x_f: Tensor,
    pub x_l: Tensor,
    pub x_fg: Tensor,
    pub hole_mask: Tensor,
}

impl Batch {
    pub fn from_bundles(bundles: &[&RegionBundle]) -> Result<Self> {
        let stack = |f: &dyn Fn(&RegionBundle) -> &Tensor| {
            Tensor::stack(&bundles.iter().map(|b| f(b)).collect::<Vec<_>>())
        };
        Ok(Self {
            x_real: stack(&|b| &b.x_real)?,
            x_crop: stack(&|b| &b.x_crop)?,
            x_m: stack(&|b| &b.x_m)?,
            x_f: stack(&|b| &b.x_f)?,
            x_l: stack(&|b| &b.x_l)?,
            x_fg: stack(&|b| &b.x_fg)?,
            hole_mask: stack(&|b| &b.hole_mask)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x_real.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
