//! PGM/PNG images and masks, and the JSON dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DatasetSpec, SegSample};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") | Some("ppm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Format(format!(
            "{}: unsupported image format (expected .png or .pgm)",
            path.display()
        ))),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let format = format_for(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads an 8-bit image as `[channels, H, W]` with values `v / 255`.
/// `channels` must be 1 (grayscale) or 3 (RGB).
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            (0..3)
                .flat_map(|c| rgb.iter().skip(c).step_by(3).map(|&v| f64::from(v) / 255.0).collect::<Vec<_>>())
                .collect()
        }
        c => {
            return Err(Error::invalid(
                "load_image",
                format!("{c} channels (expected 1 or 3)"),
            ))
        }
    };
    Tensor::new(&[channels, h, w], data)
}

/// Loads a grayscale mask whose pixel values are class indices.
pub fn load_mask(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.to_luma8().into_raw().into_iter().map(usize::from).collect();
    LabelMap::new(&[h, w], data)
}

pub fn load_sample(image_path: &Path, label_path: &Path, channels: usize) -> Result<SegSample> {
    let image = load_image(image_path, channels)?;
    let label = load_mask(label_path)?;
    if image.shape()[1..] != *label.shape() {
        return Err(Error::shape(
            "load_sample",
            format!(
                "image {} is {:?} but label {} is {:?}",
                image_path.display(),
                &image.shape()[1..],
                label_path.display(),
                label.shape()
            ),
        ));
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SegSample::new(image, label, id)
}

fn save_gray(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    let format = format_for(path)?;
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches size");
    img.save_with_format(path, format)?;
    Ok(())
}

/// Writes an `[H, W]` class map; labels must fit in 8 bits.
pub fn save_mask(mask: &LabelMap, path: &Path) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::shape("save_mask", format!("expected [H, W], got {s:?}")));
    }
    if mask.max_label() > 255 {
        return Err(Error::invalid(
            "save_mask",
            format!("label {} does not fit in 8 bits", mask.max_label()),
        ));
    }
    let bytes = mask.data().iter().map(|&l| l as u8).collect();
    save_gray(path, s[1], s[0], bytes)
}

/// Writes a `[1, H, W]` or `[3, H, W]` image in `[0, 1]` as 8-bit.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match s {
        [1, h, w] => save_gray(path, *w, *h, image.data().iter().map(|&v| quant(v)).collect()),
        [3, h, w] => {
            let plane = h * w;
            let d = image.data();
            let bytes = (0..plane)
                .flat_map(|p| (0..3).map(move |c| quant(d[c * plane + p])))
                .collect();
            let img = RgbImage::from_raw(*w as u32, *h as u32, bytes).expect("buffer matches size");
            img.save_with_format(path, format_for(path)?)?;
            Ok(())
        }
        _ => Err(Error::shape("save_image", format!("expected [1|3, H, W], got {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub channels: usize,
    pub size: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `images/<id>.png`, `labels/<id>.png` and `manifest.json` under `dir`.
pub fn write_dataset(
    dir: &Path,
    samples: &[SegSample],
    num_classes: usize,
    spec: Option<&DatasetSpec>,
) -> Result<Manifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("write_dataset", "no samples"))?;
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let label = PathBuf::from("labels").join(format!("{}.png", s.id));
        save_image(&s.image, &dir.join(&image))?;
        save_mask(&s.label, &dir.join(&label))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            label,
        });
    }
    let manifest = Manifest {
        num_classes,
        channels: first.channels(),
        size: (first.height(), first.width()),
        spec: spec.cloned(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset directory (or a manifest file path).
pub fn load_dataset(path: &Path) -> Result<(Manifest, Vec<SegSample>)> {
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let mut s = load_sample(&dir.join(&e.image), &dir.join(&e.label), manifest.channels)?;
        s.label.check_range(manifest.num_classes)?;
        s.id = e.id.clone();
        samples.push(s);
    }
    Ok((manifest, samples))
}
