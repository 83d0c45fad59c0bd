//! Procedural face-like images and four synthetic manipulation families.
//!
//! Every function here is a pure function of its explicit seed. Real images
//! are painted from a seeded ChaCha stream in a fixed pixel order, so the
//! same `(seed, size)` always yields the same bits.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub const MIN_IMAGE_SIZE: usize = 64;
pub const DEFAULT_IMAGE_SIZE: usize = 320;

const GRID_AMPLITUDE: f64 = 0.045;

/// Landmark positions in pixel coordinates of the image they belong to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    pub mouth_center: [f64; 2],
    /// `[x0, y0, x1, y1]`.
    pub face_box: [f64; 4],
}

impl LandmarkSet {
    pub fn points(&self) -> [[f64; 2]; 3] {
        [self.left_eye, self.right_eye, self.mouth_center]
    }

    pub fn inside_image(&self, width: usize, height: usize) -> bool {
        let (w, h) = (width as f64, height as f64);
        let in_img = |p: [f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w && p[1] < h;
        let [x0, y0, x1, y1] = self.face_box;
        self.points().iter().all(|&p| in_img(p)) && x0 >= 0.0 && y0 >= 0.0 && x1 <= w && y1 <= h
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !self.inside_image(width, height) {
            return Err(invalid(format!("landmarks {self:?} outside {width}x{height} image")));
        }
        Ok(())
    }

    /// Face box intersected with a `width x height` frame.
    pub fn with_clipped_box(&self, width: usize, height: usize) -> Self {
        let [x0, y0, x1, y1] = self.face_box;
        let (w, h) = (width as f64, height as f64);
        Self { face_box: [x0.clamp(0.0, w), y0.clamp(0.0, h), x1.clamp(0.0, w), y1.clamp(0.0, h)], ..*self }
    }

    /// Apply a 2x3 affine `[a, b, tx, c, d, ty]` to every landmark.
    /// The face box becomes the bounding box of its transformed corners.
    pub fn transformed(&self, warp: &[f64; 6]) -> Self {
        let map = |p: [f64; 2]| {
            [warp[0] * p[0] + warp[1] * p[1] + warp[2], warp[3] * p[0] + warp[4] * p[1] + warp[5]]
        };
        let [x0, y0, x1, y1] = self.face_box;
        let corners = [[x0, y0], [x1, y0], [x0, y1], [x1, y1]].map(map);
        let xs = corners.map(|p| p[0]);
        let ys = corners.map(|p| p[1]);
        let fold = |v: [f64; 4], f: fn(f64, f64) -> f64, init: f64| v.iter().fold(init, |a, &b| f(a, b));
        LandmarkSet {
            left_eye: map(self.left_eye),
            right_eye: map(self.right_eye),
            mouth_center: map(self.mouth_center),
            face_box: [
                fold(xs, f64::min, f64::INFINITY),
                fold(ys, f64::min, f64::INFINITY),
                fold(xs, f64::max, f64::NEG_INFINITY),
                fold(ys, f64::max, f64::NEG_INFINITY),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyId {
    None,
    LocalBlend,
    GridArtifact,
    EyeTexture,
    ColorShift,
}

impl FamilyId {
    pub const MANIPULATED: [FamilyId; 4] =
        [FamilyId::LocalBlend, FamilyId::GridArtifact, FamilyId::EyeTexture, FamilyId::ColorShift];

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyId::None => "none",
            FamilyId::LocalBlend => "local_blend",
            FamilyId::GridArtifact => "grid_artifact",
            FamilyId::EyeTexture => "eye_texture",
            FamilyId::ColorShift => "color_shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        [FamilyId::None]
            .into_iter()
            .chain(Self::MANIPULATED)
            .find(|f| f.as_str() == norm)
            .ok_or_else(|| invalid(format!("unknown manipulation family '{s}'")))
    }

    /// Family with the default desk-scale parameters.
    pub fn default_family(self) -> ManipulationFamily {
        match self {
            FamilyId::None => ManipulationFamily::None,
            FamilyId::LocalBlend => ManipulationFamily::LocalBlend { patch_radius: 24.0 },
            FamilyId::GridArtifact => ManipulationFamily::GridArtifact { period: 4.0 },
            FamilyId::EyeTexture => ManipulationFamily::EyeTexture { amplitude: 0.15 },
            FamilyId::ColorShift => ManipulationFamily::ColorShift { hue_shift: 0.08 },
        }
    }

    fn tag(self) -> u64 {
        match self {
            FamilyId::None => 0,
            FamilyId::LocalBlend => 1,
            FamilyId::GridArtifact => 2,
            FamilyId::EyeTexture => 3,
            FamilyId::ColorShift => 4,
        }
    }
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A manipulation family together with its single scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManipulationFamily {
    None,
    /// Blur-and-reblend of a disc around the mouth, leaving a seam.
    LocalBlend { patch_radius: f64 },
    /// Global periodic tile pattern, like upsampling checkerboards.
    GridArtifact { period: f64 },
    /// Eye neighbourhoods replaced by spatially correlated noise.
    EyeTexture { amplitude: f64 },
    /// Hue rotation restricted to the face box.
    ColorShift { hue_shift: f64 },
}

impl ManipulationFamily {
    pub fn id(&self) -> FamilyId {
        match self {
            ManipulationFamily::None => FamilyId::None,
            ManipulationFamily::LocalBlend { .. } => FamilyId::LocalBlend,
            ManipulationFamily::GridArtifact { .. } => FamilyId::GridArtifact,
            ManipulationFamily::EyeTexture { .. } => FamilyId::EyeTexture,
            ManipulationFamily::ColorShift { .. } => FamilyId::ColorShift,
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match *self {
            ManipulationFamily::None => {}
            ManipulationFamily::LocalBlend { patch_radius } => {
                m.insert("patch_radius".into(), patch_radius);
            }
            ManipulationFamily::GridArtifact { period } => {
                m.insert("period".into(), period);
            }
            ManipulationFamily::EyeTexture { amplitude } => {
                m.insert("amplitude".into(), amplitude);
            }
            ManipulationFamily::ColorShift { hue_shift } => {
                m.insert("hue_shift".into(), hue_shift);
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.params() {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{} parameter {k} must be positive, got {v}", self.id())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown split '{s}'")))
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: ManipulationFamily,
    pub n_pairs: usize,
    pub seed: u64,
    pub split: Split,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    DEFAULT_IMAGE_SIZE
}

impl DatasetSpec {
    pub fn new(family: ManipulationFamily, n_pairs: usize, seed: u64, split: Split) -> Self {
        Self { family, n_pairs, seed, split, image_size: DEFAULT_IMAGE_SIZE }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.n_pairs == 0 {
            return Err(invalid("dataset needs at least one pair"));
        }
        if self.n_pairs as u64 > u32::MAX as u64 {
            return Err(invalid("n_pairs exceeds the per-split seed range"));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(invalid(format!("image size {} below minimum {MIN_IMAGE_SIZE}", self.image_size)));
        }
        Ok(())
    }

    /// Base-image seed of pair `k`. Splits occupy disjoint high-byte ranges.
    pub fn base_seed(&self, k: usize) -> u64 {
        (self.split.tag() << 56) | ((self.seed & 0x00FF_FFFF) << 32) | k as u64
    }
}

#[derive(Clone, Debug)]
pub struct DatasetItem<T> {
    pub image: ImageTensor<T>,
    pub landmarks: LandmarkSet,
    pub label: u8,
    pub base_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub spec: DatasetSpec,
    pub items: Vec<DatasetItem<T>>,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Generate one procedural "real" face image and its landmarks.
pub fn generate_real<T: Scalar>(seed: u64, size: usize) -> Result<(ImageTensor<T>, LandmarkSet)> {
    if size < MIN_IMAGE_SIZE {
        return Err(invalid(format!("image size {size} below minimum {MIN_IMAGE_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EA1));
    let s = size as f64;

    // background: linear gradient + smooth value noise
    let bg0 = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let bg1 = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let bg_angle: f64 = rng.gen_range(0.0..2.0 * PI);
    const LATTICE: usize = 9;
    let lattice: Vec<f64> = (0..LATTICE * LATTICE).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // face geometry
    let cx = s * (0.5 + rng.gen_range(-0.04..0.04));
    let cy = s * (0.5 + rng.gen_range(-0.04..0.04));
    let a = s * rng.gen_range(0.20..0.25);
    let b = a * rng.gen_range(1.20..1.32);
    let tilt: f64 = rng.gen_range(-0.15..0.15);
    let (sin_t, cos_t) = tilt.sin_cos();
    let tone = rng.gen_range(0.0..1.0);
    let mut skin = lerp3([0.93, 0.78, 0.66], [0.50, 0.34, 0.24], tone);
    for c in &mut skin {
        *c += rng.gen_range(-0.03..0.03);
    }

    let eye_dx = a * rng.gen_range(0.36..0.44);
    let eye_dy = b * rng.gen_range(0.18..0.26);
    let sclera = [a * 0.17, a * 0.085];
    let iris_r = a * 0.07;
    let pupil_r = a * 0.032;
    let iris_col = if rng.gen_bool(0.5) {
        [rng.gen_range(0.25..0.45), rng.gen_range(0.15..0.3), rng.gen_range(0.05..0.15)]
    } else {
        [rng.gen_range(0.2..0.35), rng.gen_range(0.35..0.5), rng.gen_range(0.55..0.75)]
    };

    let mouth_y = b * rng.gen_range(0.45..0.55);
    let mouth_w = a * rng.gen_range(0.30..0.42);
    let mouth_curve = a * rng.gen_range(0.04..0.12);
    let mouth_th = s * rng.gen_range(0.008..0.013);
    let lip = [rng.gen_range(0.55..0.7), rng.gen_range(0.12..0.22), rng.gen_range(0.15..0.25)];

    // face-local (u, v) -> image (x, y)
    let to_img = |u: f64, v: f64| [cx + u * cos_t - v * sin_t, cy + u * sin_t + v * cos_t];
    let left_eye = to_img(-eye_dx, -eye_dy);
    let right_eye = to_img(eye_dx, -eye_dy);
    let mouth_center = to_img(0.0, mouth_y + mouth_curve * 0.5);
    let hx = (a * a * cos_t * cos_t + b * b * sin_t * sin_t).sqrt();
    let hy = (a * a * sin_t * sin_t + b * b * cos_t * cos_t).sqrt();
    let face_box = [(cx - hx).max(0.0), (cy - hy).max(0.0), (cx + hx).min(s), (cy + hy).min(s)];

    let value_noise = |x: f64, y: f64| {
        let gx = x / s * (LATTICE - 1) as f64;
        let gy = y / s * (LATTICE - 1) as f64;
        let ix = (gx.floor() as usize).min(LATTICE - 2);
        let iy = (gy.floor() as usize).min(LATTICE - 2);
        let tx = smoothstep(0.0, 1.0, gx - ix as f64);
        let ty = smoothstep(0.0, 1.0, gy - iy as f64);
        let l = |i: usize, j: usize| lattice[j * LATTICE + i];
        let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
        let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    };

    let (gdx, gdy) = (bg_angle.cos(), bg_angle.sin());
    let mut data = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let fine: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let lum_fine: f64 = rng.gen_range(-1.0..1.0);

            let t = (((x - s / 2.0) * gdx + (y - s / 2.0) * gdy) / s + 0.5).clamp(0.0, 1.0);
            let vn = value_noise(x, y) * 0.08;
            let mut col = lerp3(bg0, bg1, t);
            for c in 0..3 {
                col[c] += vn + 0.025 * fine[c];
            }

            // local coordinates
            let dx = x - cx;
            let dy = y - cy;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let inside = 1.0 - smoothstep(1.0 - 1.5 / a, 1.0 + 1.5 / a, r);
            if inside > 0.0 {
                let shade = 1.0 - 0.18 * r * r - 0.05 * (v / b);
                let mut face = [0.0; 3];
                for c in 0..3 {
                    face[c] = skin[c] * shade + 0.03 * lum_fine + 0.01 * fine[c];
                }
                for (eu, ev) in [(-eye_dx, -eye_dy), (eye_dx, -eye_dy)] {
                    let qu = u - eu;
                    let qv = v - ev;
                    let se = ((qu / sclera[0]).powi(2) + (qv / sclera[1]).powi(2)).sqrt();
                    if se < 1.0 {
                        let m = 1.0 - smoothstep(0.85, 1.0, se);
                        face = lerp3(face, [0.92, 0.91, 0.88], m);
                        let d = (qu * qu + qv * qv).sqrt();
                        if d < iris_r {
                            face = lerp3(face, iris_col, 1.0 - smoothstep(iris_r - 1.0, iris_r, d));
                        }
                        if d < pupil_r {
                            face = lerp3(face, [0.03, 0.03, 0.04], 1.0 - smoothstep(pupil_r - 1.0, pupil_r, d));
                        }
                    }
                }
                if u.abs() <= mouth_w {
                    let arc = mouth_y + mouth_curve * (1.0 - (u / mouth_w).powi(2));
                    let dist = (v - arc).abs();
                    if dist < mouth_th + 1.0 {
                        face = lerp3(face, lip, 1.0 - smoothstep(mouth_th - 1.0, mouth_th + 1.0, dist));
                    }
                }
                col = lerp3(col, face, inside);
            }
            for c in col {
                data.push(T::of(c.clamp(0.0, 1.0)));
            }
        }
    }

    let image = ImageTensor::from_vec(size, size, 3, data)?;
    let landmarks = LandmarkSet { left_eye, right_eye, mouth_center, face_box };
    landmarks.validate(size, size)?;
    Ok((image, landmarks))
}

fn box_blur_region(
    src: &ImageTensor<f64>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    radius: usize,
) -> Vec<[f64; 3]> {
    let (w, h) = (src.width(), src.height());
    let rw = x1 - x0;
    let mut out = vec![[0.0; 3]; rw * (y1 - y0)];
    for y in y0..y1 {
        for x in x0..x1 {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    let p = src.pixel(yy, xx);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            out[(y - y0) * rw + (x - x0)] = acc.map(|v| v / n);
        }
    }
    out
}

fn disc_bounds(center: [f64; 2], radius: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = (center[0] - radius).floor().max(0.0) as usize;
    let y0 = (center[1] - radius).floor().max(0.0) as usize;
    let x1 = ((center[0] + radius).ceil() as usize + 1).min(w);
    let y1 = ((center[1] + radius).ceil() as usize + 1).min(h);
    (x0, y0, x1, y1)
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Radius of the region rewritten around each eye by `EyeTexture`.
pub fn eye_region_radius(landmarks: &LandmarkSet) -> f64 {
    let d = ((landmarks.right_eye[0] - landmarks.left_eye[0]).powi(2)
        + (landmarks.right_eye[1] - landmarks.left_eye[1]).powi(2))
    .sqrt();
    0.22 * d
}

/// Apply one manipulation family. `None` returns an exact copy.
pub fn apply_manipulation<T: Scalar>(
    image: &ImageTensor<T>,
    landmarks: &LandmarkSet,
    family: &ManipulationFamily,
    seed: u64,
) -> Result<ImageTensor<T>> {
    family.validate()?;
    landmarks.validate(image.width(), image.height())?;
    if image.channels() != 3 {
        return Err(invalid("manipulations expect RGB images"));
    }
    if let ManipulationFamily::None = family {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, family.id().tag()));
    let src: ImageTensor<f64> = image.cast();
    let (w, h) = (src.width(), src.height());
    let mut out = image.clone();
    match *family {
        ManipulationFamily::None => unreachable!(),
        ManipulationFamily::LocalBlend { patch_radius } => {
            let c = landmarks.mouth_center;
            let (x0, y0, x1, y1) = disc_bounds(c, patch_radius, w, h);
            let blurred = box_blur_region(&src, x0, y0, x1, y1, 3);
            let offset: [f64; 3] = [0, 1, 2].map(|_| {
                let m: f64 = rng.gen_range(0.05..0.085);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = ((x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2)).sqrt();
                    if d > patch_radius {
                        continue;
                    }
                    let b = blurred[(y - y0) * (x1 - x0) + (x - x0)];
                    let px = out.pixel_mut(y, x);
                    for ch in 0..3 {
                        px[ch] = T::of((b[ch] + offset[ch]).clamp(0.0, 1.0));
                    }
                }
            }
        }
        ManipulationFamily::GridArtifact { period } => {
            let p = period.round().max(2.0) as usize;
            let amp = GRID_AMPLITUDE * rng.gen_range(0.85..1.15);
            let mut tile: Vec<f64> = (0..p * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = tile.iter().sum::<f64>() / tile.len() as f64;
            tile.iter_mut().for_each(|v| *v -= mean);
            let rms = (tile.iter().map(|v| v * v).sum::<f64>() / tile.len() as f64).sqrt().max(1e-9);
            tile.iter_mut().for_each(|v| *v *= amp / rms);
            for y in 0..h {
                for x in 0..w {
                    let t = tile[(y % p) * p + (x % p)];
                    let px = out.pixel_mut(y, x);
                    for ch in 0..3 {
                        px[ch] = T::of((src.get(y, x, ch) + t).clamp(0.0, 1.0));
                    }
                }
            }
        }
        ManipulationFamily::EyeTexture { amplitude } => {
            let radius = eye_region_radius(landmarks);
            for eye in [landmarks.left_eye, landmarks.right_eye] {
                let (x0, y0, x1, y1) = disc_bounds(eye, radius, w, h);
                let rw = x1 - x0;
                let rh = y1 - y0;
                let mut mean = [0.0; 3];
                let mut n = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        for ch in 0..3 {
                            mean[ch] += src.get(y, x, ch);
                        }
                        n += 1.0;
                    }
                }
                let mean = mean.map(|v| v / n);
                let white: Vec<f64> = (0..rw * rh * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let white = ImageTensor::from_vec(rh, rw, 3, white)?;
                let corr = box_blur_region(&white, 0, 0, rw, rh, 2);
                let sd = (corr.iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>()
                    / (corr.len() * 3) as f64)
                    .sqrt()
                    .max(1e-9);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = ((x as f64 + 0.5 - eye[0]).powi(2) + (y as f64 + 0.5 - eye[1]).powi(2)).sqrt();
                        if d > radius {
                            continue;
                        }
                        let nz = corr[(y - y0) * rw + (x - x0)];
                        let px = out.pixel_mut(y, x);
                        for ch in 0..3 {
                            px[ch] = T::of((mean[ch] + amplitude * nz[ch] / sd).clamp(0.0, 1.0));
                        }
                    }
                }
            }
        }
        ManipulationFamily::ColorShift { hue_shift } => {
            let shift = hue_shift * rng.gen_range(0.85..1.15);
            let [bx0, by0, bx1, by1] = landmarks.face_box;
            for y in 0..h {
                let yc = y as f64 + 0.5;
                if yc < by0 || yc >= by1 {
                    continue;
                }
                for x in 0..w {
                    let xc = x as f64 + 0.5;
                    if xc < bx0 || xc >= bx1 {
                        continue;
                    }
                    let mut hsv = rgb_to_hsv([src.get(y, x, 0), src.get(y, x, 1), src.get(y, x, 2)]);
                    hsv[0] += shift;
                    let rgb = hsv_to_rgb(hsv);
                    let px = out.pixel_mut(y, x);
                    for ch in 0..3 {
                        px[ch] = T::of(rgb[ch].clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Build `n_pairs` reals and their manipulated counterparts, interleaved
/// as `(real_0, fake_0, real_1, fake_1, ...)`.
pub fn build_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut items = Vec::with_capacity(spec.n_pairs * 2);
    for k in 0..spec.n_pairs {
        let base_seed = spec.base_seed(k);
        let (real, landmarks) = generate_real::<T>(base_seed, spec.image_size)?;
        let fake = apply_manipulation(&real, &landmarks, &spec.family, mix_seed(base_seed, 0xFA4E))?;
        items.push(DatasetItem { image: real, landmarks, label: 0, base_seed });
        items.push(DatasetItem { image: fake, landmarks, label: 1, base_seed });
    }
    Ok(Dataset { spec: *spec, items })
}
