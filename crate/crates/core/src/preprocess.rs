//! Margin crop around the face box and left-eye similarity alignment.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::synthgen::LandmarkSet;
use crate::tensor::ImageTensor;

/// 2x3 affine `[a, b, tx, c, d, ty]` mapping source to destination pixels.
pub type Affine = [f64; 6];

pub const IDENTITY: Affine = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

pub fn apply_affine(m: &Affine, p: [f64; 2]) -> [f64; 2] {
    [m[0] * p[0] + m[1] * p[1] + m[2], m[3] * p[0] + m[4] * p[1] + m[5]]
}

pub fn invert_affine(m: &Affine) -> Result<Affine> {
    let det = m[0] * m[4] - m[1] * m[3];
    if det.abs() < 1e-12 {
        return Err(Error::DegenerateGeometry("singular affine".into()));
    }
    let (a, b, c, d) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
    Ok([a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])])
}

/// Relative margins added on each side of the face box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropMargins {
    /// Fraction of box height added above and below.
    pub vertical: f64,
    /// Fraction of box width added left and right.
    pub horizontal: f64,
}

impl Default for CropMargins {
    fn default() -> Self {
        Self { vertical: 0.15, horizontal: 0.10 }
    }
}

/// Integer crop rectangle `[x0, x1) x [y0, y1)` in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Expanded, clipped crop rectangle for `face_box` (`[x0, y0, x1, y1]`).
pub fn margin_rect(width: usize, height: usize, face_box: [f64; 4], margins: CropMargins) -> Result<CropRect> {
    let [x0, y0, x1, y1] = face_box;
    let (bw, bh) = (x1 - x0, y1 - y0);
    if !(bw > 0.0 && bh > 0.0) || !face_box.iter().all(|v| v.is_finite()) {
        return Err(invalid(format!("degenerate face box {face_box:?}")));
    }
    if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
        return Err(invalid(format!("face box {face_box:?} outside {width}x{height} image")));
    }
    let mx = margins.horizontal * bw;
    let my = margins.vertical * bh;
    let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64);
    let rect = CropRect {
        x0: clip((x0 - mx).floor(), width) as usize,
        y0: clip((y0 - my).floor(), height) as usize,
        x1: clip((x1 + mx).ceil(), width) as usize,
        y1: clip((y1 + my).ceil(), height) as usize,
    };
    Ok(rect)
}

/// Crop the face box plus margins; returns the crop and its rectangle.
pub fn crop_with_margin<T: Scalar>(
    image: &ImageTensor<T>,
    face_box: [f64; 4],
    margins: CropMargins,
) -> Result<(ImageTensor<T>, CropRect)> {
    let r = margin_rect(image.width(), image.height(), face_box, margins)?;
    Ok((image.crop(r.x0, r.y0, r.x1, r.y1)?, r))
}

/// Target geometry of aligned faces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalFrame {
    pub out_size: usize,
    pub left_eye_target: [f64; 2],
    /// Unit vector the left-to-right eye direction is mapped onto.
    pub eye_axis: [f64; 2],
    pub eye_distance: f64,
}

impl Default for CanonicalFrame {
    fn default() -> Self {
        Self { out_size: 256, left_eye_target: [96.0, 112.0], eye_axis: [1.0, 0.0], eye_distance: 80.0 }
    }
}

impl CanonicalFrame {
    pub fn validate(&self) -> Result<()> {
        let s = self.out_size as f64;
        let [tx, ty] = self.left_eye_target;
        if self.out_size == 0 || !(0.0..s).contains(&tx) || !(0.0..s).contains(&ty) {
            return Err(invalid("left-eye target outside the output frame"));
        }
        let n = self.eye_axis[0].hypot(self.eye_axis[1]);
        if (n - 1.0).abs() > 1e-9 {
            return Err(invalid("eye axis must be a unit vector"));
        }
        if !(self.eye_distance > 0.0) {
            return Err(invalid("eye distance must be positive"));
        }
        Ok(())
    }
}

/// Similarity transform taking the eyes onto the canonical frame.
pub fn similarity_for(landmarks: &LandmarkSet, frame: &CanonicalFrame) -> Result<Affine> {
    frame.validate()?;
    let [lx, ly] = landmarks.left_eye;
    let dx = landmarks.right_eye[0] - lx;
    let dy = landmarks.right_eye[1] - ly;
    let dist = dx.hypot(dy);
    if !(dist > 1e-9) {
        return Err(Error::DegenerateGeometry("left and right eye coincide".into()));
    }
    let scale = frame.eye_distance / dist;
    let angle = frame.eye_axis[1].atan2(frame.eye_axis[0]) - dy.atan2(dx);
    let (sin, cos) = angle.sin_cos();
    let (a, b, c, d) = (scale * cos, -scale * sin, scale * sin, scale * cos);
    let [tx, ty] = frame.left_eye_target;
    Ok([a, b, tx - (a * lx + b * ly), c, d, ty - (c * lx + d * ly)])
}

/// Resample `image` through `warp` into an `out x out` canvas, zero fill.
pub fn warp_image<T: Scalar>(image: &ImageTensor<T>, warp: &Affine, out: usize) -> Result<ImageTensor<T>> {
    let inv = invert_affine(warp)?;
    let ch = image.channels();
    let mut dst = ImageTensor::zeros(out, out, ch);
    let mut buf = vec![T::zero(); ch];
    for y in 0..out {
        for x in 0..out {
            // pixel centres sit at integer + 0.5 in both frames
            let [sx, sy] = apply_affine(&inv, [x as f64 + 0.5, y as f64 + 0.5]);
            image.sample_bilinear(sy - 0.5, sx - 0.5, &mut buf);
            dst.pixel_mut(y, x).copy_from_slice(&buf);
        }
    }
    Ok(dst)
}

/// Align so the left eye lands on the frame's target. Returns the aligned
/// image and the source-to-output affine.
pub fn align_left_eye<T: Scalar>(
    image: &ImageTensor<T>,
    landmarks: &LandmarkSet,
    frame: &CanonicalFrame,
) -> Result<(ImageTensor<T>, Affine)> {
    let warp = similarity_for(landmarks, frame)?;
    let out = warp_image(image, &warp, frame.out_size)?;
    Ok((out, warp))
}

/// Output of the full crop + align chain for one image.
#[derive(Clone, Debug)]
pub struct Preprocessed<T> {
    pub image: ImageTensor<T>,
    /// Maps original (uncropped) pixel coordinates to aligned coordinates.
    pub warp: Affine,
    /// Aligned landmarks; the face box is clipped to the output frame.
    pub landmarks: LandmarkSet,
}

/// Crop with margins, then align the crop.
pub fn preprocess_face<T: Scalar>(
    image: &ImageTensor<T>,
    landmarks: &LandmarkSet,
    margins: CropMargins,
    frame: &CanonicalFrame,
) -> Result<Preprocessed<T>> {
    let (crop, rect) = crop_with_margin(image, landmarks.face_box, margins)?;
    let shift: Affine = [1.0, 0.0, -(rect.x0 as f64), 0.0, 1.0, -(rect.y0 as f64)];
    let local = landmarks.transformed(&shift);
    let (aligned, warp) = align_left_eye(&crop, &local, frame)?;
    let total = compose(&warp, &shift);
    let out = frame.out_size;
    Ok(Preprocessed { image: aligned, warp: total, landmarks: landmarks.transformed(&total).with_clipped_box(out, out) })
}

/// `outer ∘ inner`.
pub fn compose(outer: &Affine, inner: &Affine) -> Affine {
    [
        outer[0] * inner[0] + outer[1] * inner[3],
        outer[0] * inner[1] + outer[1] * inner[4],
        outer[0] * inner[2] + outer[1] * inner[5] + outer[2],
        outer[3] * inner[0] + outer[4] * inner[3],
        outer[3] * inner[1] + outer[4] * inner[4],
        outer[3] * inner[2] + outer[4] * inner[5] + outer[5],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_real;

    #[test]
    fn crop_margins_example() {
        let img = ImageTensor::<f32>::zeros(400, 400, 3);
        let (crop, r) = crop_with_margin(&img, [100.0, 100.0, 200.0, 200.0], CropMargins::default()).unwrap();
        assert_eq!(r, CropRect { x0: 90, y0: 85, x1: 210, y1: 215 });
        assert_eq!((crop.width(), crop.height()), (120, 130));
    }

    #[test]
    fn crop_clips_at_border() {
        let img = ImageTensor::<f32>::zeros(200, 200, 3);
        let (_, r) = crop_with_margin(&img, [0.0, 0.0, 100.0, 200.0], CropMargins::default()).unwrap();
        assert_eq!(r, CropRect { x0: 0, y0: 0, x1: 110, y1: 200 });
    }

    #[test]
    fn zero_margins_is_identity_crop() {
        let img = ImageTensor::<f32>::zeros(50, 50, 1);
        let m = CropMargins { vertical: 0.0, horizontal: 0.0 };
        let (_, r) = crop_with_margin(&img, [10.0, 12.0, 30.0, 40.0], m).unwrap();
        assert_eq!(r, CropRect { x0: 10, y0: 12, x1: 30, y1: 40 });
    }

    #[test]
    fn degenerate_box_rejected() {
        let img = ImageTensor::<f32>::zeros(50, 50, 1);
        let err = crop_with_margin(&img, [10.0, 10.0, 10.0, 30.0], CropMargins::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn canonical_pose_gives_identity_warp() {
        let l = LandmarkSet {
            left_eye: [96.0, 112.0],
            right_eye: [176.0, 112.0],
            mouth_center: [136.0, 180.0],
            face_box: [50.0, 40.0, 220.0, 240.0],
        };
        let w = similarity_for(&l, &CanonicalFrame::default()).unwrap();
        for (a, b) in w.iter().zip(IDENTITY.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_eyes_rejected() {
        let l = LandmarkSet {
            left_eye: [50.0, 50.0],
            right_eye: [50.0, 50.0],
            mouth_center: [50.0, 80.0],
            face_box: [0.0, 0.0, 100.0, 100.0],
        };
        let img = ImageTensor::<f32>::zeros(100, 100, 3);
        assert!(matches!(
            align_left_eye(&img, &l, &CanonicalFrame::default()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn warp_places_eyes_and_idempotent() {
        let (img, l) = generate_real::<f64>(21, 320).unwrap();
        let frame = CanonicalFrame::default();
        let (out, w) = align_left_eye(&img, &l, &frame).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (256, 256, 3));
        let le = apply_affine(&w, l.left_eye);
        let re = apply_affine(&w, l.right_eye);
        assert!((le[0] - 96.0).abs() < 1e-9 && (le[1] - 112.0).abs() < 1e-9);
        assert!((re[0] - 176.0).abs() < 1e-9 && (re[1] - 112.0).abs() < 1e-9);
        let aligned_l = l.transformed(&w);
        let w2 = similarity_for(&aligned_l, &frame).unwrap();
        let err = w2.iter().zip(IDENTITY.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn warp_inverse_roundtrip() {
        let m = [0.8, -0.3, 12.0, 0.3, 0.8, -4.0];
        let inv = invert_affine(&m).unwrap();
        let p = [13.5, -2.25];
        let q = apply_affine(&inv, apply_affine(&m, p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn preprocess_chain_tracks_landmarks() {
        let (img, l) = generate_real::<f32>(5, 320).unwrap();
        let p = preprocess_face(&img, &l, CropMargins::default(), &CanonicalFrame::default()).unwrap();
        assert!((p.landmarks.left_eye[0] - 96.0).abs() < 1e-6);
        assert!((p.landmarks.left_eye[1] - 112.0).abs() < 1e-6);
        assert_eq!(p.image.width(), 256);
    }
}
