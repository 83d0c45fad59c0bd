//! File artifacts: atomic writes, PNG images, on-disk datasets.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::synthgen::{Dataset, DatasetItem, DatasetSpec, LandmarkSet};
use crate::tensor::ImageTensor;

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode 8-bit pixels with fixed encoder settings.
pub fn encode_png(pixels: &[u8], width: usize, height: usize, channels: usize) -> Result<Vec<u8>> {
    let color = match channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(invalid(format!("cannot encode {channels}-channel PNG"))),
    };
    if pixels.len() != width * height * channels {
        return Err(invalid("pixel buffer size mismatch"));
    }
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive).write_image(
        pixels,
        width as u32,
        height as u32,
        color,
    )?;
    Ok(out)
}

/// Values in `[0, 1]` are mapped to 8 bits.
pub fn save_png<T: Scalar>(image: &ImageTensor<T>, path: &Path) -> Result<()> {
    let px: Vec<u8> = image.data().iter().map(|v| quantize(v.as_f64())).collect();
    write_atomic(path, &encode_png(&px, image.width(), image.height(), image.channels())?)
}

pub fn save_gray_png(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let px: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    write_atomic(path, &encode_png(&px, width, height, 1)?)
}

/// Load any PNG as RGB in `[0, 1]`.
pub fn load_png<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| T::of(v as f64 / 255.0)).collect();
    ImageTensor::from_vec(h, w, 3, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: u8,
    pub base_seed: u64,
    pub landmarks: LandmarkSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub items: Vec<ManifestEntry>,
}

/// `<root>/<family>/<split>`.
pub fn dataset_dir(root: &Path, spec: &DatasetSpec) -> PathBuf {
    root.join(spec.family.id().as_str()).join(spec.split.as_str())
}

/// Write a dataset as `{real,fake}/<base_seed>.png` plus `manifest.json`.
pub fn write_dataset<T: Scalar>(root: &Path, dataset: &Dataset<T>) -> Result<PathBuf> {
    let dir = dataset_dir(root, &dataset.spec);
    let mut items = Vec::with_capacity(dataset.items.len());
    for item in &dataset.items {
        let sub = if item.label == 1 { "fake" } else { "real" };
        let file = format!("{sub}/{:016x}.png", item.base_seed);
        save_png(&item.image, &dir.join(&file))?;
        items.push(ManifestEntry { file, label: item.label, base_seed: item.base_seed, landmarks: item.landmarks });
    }
    write_json(&dir.join("manifest.json"), &DatasetManifest { spec: dataset.spec.clone(), items })?;
    Ok(dir)
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    manifest.spec.validate()?;
    let items = manifest
        .items
        .into_iter()
        .map(|e| {
            let image = load_png(&dir.join(&e.file))?;
            e.landmarks.validate(image.width(), image.height())?;
            Ok(DatasetItem { image, landmarks: e.landmarks, label: e.label, base_seed: e.base_seed })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: manifest.spec, items })
}
