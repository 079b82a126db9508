//! Dataset ingestion and the on-disk conventions for RGB-D semantic data.
//!
//! A dataset root holds `rgb/`, `depth/` and `label/` directories with
//! filename-aligned PNGs. RGB is 8-bit colour, depth is 16-bit grayscale in
//! millimetres (0 = no reading) and labels are 8-bit class indices with
//! [`VOID`] marking unlabeled pixels. A per-split subdirectory
//! (`root/train/rgb/...`) is used when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, RgbImage as RgbBuffer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Label value for unlabeled pixels.
pub const VOID: u8 = 255;

/// Noise channels of the full-size generator.
pub const NOISE_CHANNELS: usize = 64;

pub const DEFAULT_SIZE: (usize, usize) = (256, 512);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, classes: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            contract!("label map must be non-empty, got {height}x{width}");
        }
        if classes.len() != height * width {
            contract!(
                "label map has {} values for {height}x{width}",
                classes.len()
            );
        }
        if num_classes == 0 || num_classes > VOID as usize {
            contract!("num_classes must be in 1..=255, got {num_classes}");
        }
        if let Some(&bad) = classes
            .iter()
            .find(|&&c| c != VOID && c as usize >= num_classes)
        {
            contract!("label value {bad} out of range for {num_classes} classes");
        }
        Ok(Self {
            height,
            width,
            num_classes,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Sorted list of non-VOID classes occurring in the map.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = vec![false; self.num_classes];
        for &c in &self.classes {
            if c != VOID {
                seen[c as usize] = true;
            }
        }
        (0..self.num_classes as u8)
            .filter(|&c| seen[c as usize])
            .collect()
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let classes = nearest_indices(self.height, self.width, height, width)
            .map(|i| self.classes[i])
            .collect();
        Self {
            height,
            width,
            num_classes: self.num_classes,
            classes,
        }
    }

    /// Per-pixel argmax over an (N, H, W) score tensor; the inverse of
    /// [`encode_label`] on non-VOID pixels.
    pub fn from_scores(scores: &Tensor) -> Result<Self> {
        let (n, h, w) = scores.dims3()?;
        let classes = scores
            .argmax(0)?
            .flatten_all()?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|c| c as u8)
            .collect();
        Self::new(h, w, n, classes)
    }
}

fn nearest_indices(
    h: usize,
    w: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = usize> {
    (0..height).flat_map(move |y| {
        let sy = y * h / height;
        (0..width).map(move |x| sy * w + x * w / width)
    })
}

/// Colour image, channel-major, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            contract!("rgb image has {} values for 3x{height}x{width}", data.len());
        }
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            contract!("rgb values must lie in [-1, 1]");
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            contract!("rgb tensor must have 3 channels, got {c}");
        }
        let data = t
            .to_dtype(DType::F32)?
            .clamp(-1f32, 1f32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    pub fn from_rgb8(img: &RgbBuffer) -> Self {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * height * width];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * height * width + y as usize * width + x as usize] =
                    px.0[c] as f32 / 127.5 - 1.0;
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbBuffer {
        let plane = self.height * self.width;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb(std::array::from_fn(|c| {
                ((self.data[c * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            }))
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Depth in [-1, 1] with a validity mask; invalid pixels hold -1.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
    max_depth_m: f32,
}

impl DepthMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f32>,
        valid: Vec<bool>,
        max_depth_m: f32,
    ) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            contract!("depth map buffers do not match {height}x{width}");
        }
        if max_depth_m <= 0.0 {
            contract!("max_depth_m must be positive, got {max_depth_m}");
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            contract!("depth values must lie in [-1, 1]");
        }
        let mut values = values;
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = -1.0;
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
            max_depth_m,
        })
    }

    /// Wraps a generator output; every pixel is valid.
    pub fn from_tensor(t: &Tensor, max_depth_m: f32) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            contract!("depth tensor must have 1 channel, got {c}");
        }
        let values = t
            .to_dtype(DType::F32)?
            .clamp(-1f32, 1f32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, values, vec![true; h * w], max_depth_m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn max_depth_m(&self) -> f32 {
        self.max_depth_m
    }

    pub(crate) fn set(&mut self, i: usize, value: f32, valid: bool) {
        self.values[i] = if valid { value } else { -1.0 };
        self.valid[i] = valid;
    }

    /// Depth in metres; invalid pixels map to 0.
    pub fn meters(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| {
                if ok {
                    (v as f64 + 1.0) / 2.0 * self.max_depth_m as f64
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Millimetre encoding used on disk; invalid pixels map to 0.
    pub fn to_millimeters(&self) -> Vec<u16> {
        self.meters()
            .into_iter()
            .zip(&self.valid)
            .map(|(m, &ok)| {
                if ok {
                    (m * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn validity_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mask: Vec<f32> = self.valid.iter().map(|&v| v as u8 as f32).collect();
        Ok(Tensor::from_vec(mask, (1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Maps raw sensor depth (mm, 0 = missing) into [-1, 1], saturating at
/// `max_depth_m`.
pub fn normalize_depth(
    raw_mm: &[u16],
    height: usize,
    width: usize,
    max_depth_m: f32,
) -> Result<DepthMap> {
    if max_depth_m <= 0.0 {
        contract!("max_depth_m must be positive, got {max_depth_m}");
    }
    if raw_mm.len() != height * width {
        contract!("raw depth has {} values for {height}x{width}", raw_mm.len());
    }
    let max = max_depth_m as f64;
    let (values, valid) = raw_mm
        .iter()
        .map(|&mm| {
            if mm == 0 {
                (-1.0, false)
            } else {
                let m = (mm as f64 / 1000.0).min(max);
                ((2.0 * m / max - 1.0) as f32, true)
            }
        })
        .unzip();
    DepthMap::new(height, width, values, valid, max_depth_m)
}

/// One-hot (N, H, W) encoding; VOID pixels are zero in every channel.
pub fn encode_label(label: &LabelMap, dtype: DType, device: &Device) -> Result<Tensor> {
    let plane = label.height * label.width;
    let mut data = vec![0f32; label.num_classes * plane];
    for (i, &c) in label.classes.iter().enumerate() {
        if c != VOID {
            data[c as usize * plane + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (label.num_classes, label.height, label.width), device)?.to_dtype(dtype)?)
}

/// Stacks one-hot encodings into (B, N, H, W).
pub fn encode_labels(labels: &[LabelMap], dtype: DType, device: &Device) -> Result<Tensor> {
    if labels.is_empty() {
        contract!("cannot encode an empty batch of label maps");
    }
    let encoded = labels
        .iter()
        .map(|l| encode_label(l, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&encoded, 0)?)
}

/// (B, 1, H, W) mask with 1 on labeled pixels and 0 on VOID.
pub fn label_validity(labels: &[LabelMap], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = (labels[0].height, labels[0].width);
    let mask: Vec<f32> = labels
        .iter()
        .flat_map(|l| l.classes.iter().map(|&c| (c != VOID) as u8 as f32))
        .collect();
    Ok(Tensor::from_vec(mask, (labels.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// C × H × W standard-normal noise for a single image.
#[derive(Debug, Clone)]
pub struct NoiseTensor(Tensor);

impl NoiseTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c == 0 {
            contract!("noise needs at least one channel");
        }
        Ok(Self(t))
    }
}

pub fn sample_noise<R: Rng>(
    rng: &mut R,
    channels: usize,
    height: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<NoiseTensor> {
    if channels == 0 || height == 0 || width == 0 {
        contract!("noise size must be positive, got {channels}x{height}x{width}");
    }
    let n = channels * height * width;
    let values: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let t = Tensor::from_vec(values, (channels, height, width), device)?.to_dtype(dtype)?;
    Ok(NoiseTensor(t))
}

/// Noise for a whole batch, shaped (B, channels, H, W).
pub fn sample_noise_batch<R: Rng>(
    rng: &mut R,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = batch * channels * height * width;
    let values: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, (batch, channels, height, width), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub name: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    root: PathBuf,
    split: Split,
    num_classes: usize,
    samples: Vec<SamplePaths>,
}

const MODALITIES: [&str; 3] = ["rgb", "depth", "label"];

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

pub fn load_dataset(root: &Path, split: Split, num_classes: usize) -> Result<DatasetIndex> {
    let split_dir = root.join(split.as_str());
    let base = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
    let mut listings = Vec::with_capacity(3);
    for modality in MODALITIES {
        let dir = base.join(modality);
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir));
        }
        listings.push(list_stems(&dir)?);
    }
    for (i, listing) in listings.iter().enumerate() {
        for (stem, path) in listing {
            if listings.iter().enumerate().any(|(j, other)| j != i && !other.contains_key(stem)) {
                return Err(Error::OrphanFile(path.clone()));
            }
        }
    }
    let [rgb, depth, label]: [BTreeMap<String, PathBuf>; 3] =
        listings.try_into().expect("three modalities");
    if rgb.is_empty() {
        return Err(Error::EmptySplit(base));
    }
    let samples = rgb
        .into_iter()
        .map(|(name, rgb_path)| SamplePaths {
            depth: depth[&name].clone(),
            label: label[&name].clone(),
            rgb: rgb_path,
            name,
        })
        .collect();
    Ok(DatasetIndex {
        root: base,
        split,
        num_classes,
        samples,
    })
}

/// Decoded, resized training sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub label: LabelMap,
}

impl DatasetIndex {
    pub fn from_samples(
        root: PathBuf,
        split: Split,
        num_classes: usize,
        samples: Vec<SamplePaths>,
    ) -> Self {
        Self {
            root,
            split,
            num_classes,
            samples,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[SamplePaths] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shuffled visiting order for one epoch, a pure function of
    /// `(seed, split, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let split_salt = match self.split {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Val => 0x7661_6c00_0000_0000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn load(&self, i: usize, size: (usize, usize), max_depth_m: f32) -> Result<Sample> {
        let paths = &self.samples[i];
        let (height, width) = size;
        Ok(Sample {
            name: paths.name.clone(),
            rgb: read_rgb(&paths.rgb, height, width)?,
            depth: read_depth(&paths.depth, height, width, max_depth_m)?,
            label: read_label(&paths.label, height, width, self.num_classes)?,
        })
    }
}

pub fn read_rgb(path: &Path, height: usize, width: usize) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let img = if (img.height() as usize, img.width() as usize) != (height, width) {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(RgbImage::from_rgb8(&img))
}

/// Reads a 16-bit millimetre depth PNG, resized by nearest neighbour.
pub fn read_depth_mm(path: &Path, height: usize, width: usize) -> Result<Vec<u16>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma16();
    let (h, w) = (img.height() as usize, img.width() as usize);
    let raw = img.into_raw();
    Ok(nearest_indices(h, w, height, width).map(|i| raw[i]).collect())
}

pub fn read_depth(path: &Path, height: usize, width: usize, max_depth_m: f32) -> Result<DepthMap> {
    let raw = read_depth_mm(path, height, width)?;
    normalize_depth(&raw, height, width, max_depth_m)
}

pub fn read_label(path: &Path, height: usize, width: usize, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let (h, w) = (img.height() as usize, img.width() as usize);
    let raw = img.into_raw();
    if let Some(&value) = raw.iter().find(|&&c| c != VOID && c as usize >= num_classes) {
        return Err(Error::InvalidLabel {
            path: path.to_path_buf(),
            value,
            num_classes,
        });
    }
    let classes = nearest_indices(h, w, height, width).map(|i| raw[i]).collect();
    LabelMap::new(height, width, num_classes, classes)
}

/// Reads a label PNG at its native resolution.
pub fn read_label_native(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::image(path, e))?;
    read_label(path, h as usize, w as usize, num_classes)
}

/// Reads an RGB PNG at its native resolution.
pub fn read_rgb_native(path: &Path) -> Result<RgbImage> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::image(path, e))?;
    read_rgb(path, h as usize, w as usize)
}

/// Reads a depth PNG at its native resolution.
pub fn read_depth_native(path: &Path, max_depth_m: f32) -> Result<DepthMap> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::image(path, e))?;
    read_depth(path, h as usize, w as usize, max_depth_m)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.to_rgb8().save(path).map_err(|e| Error::image(path, e))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, depth.to_millimeters())
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let buf = GrayImage::from_raw(label.width as u32, label.height as u32, label.classes.clone())
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, n: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, n, v.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_single_pixel() -> Result<()> {
        let t = encode_label(&map(1, 1, 2, &[0]), DType::F32, &Device::Cpu)?;
        assert_eq!(t.flatten_all()?.to_vec1::<f32>()?, vec![1.0, 0.0]);
        let t = encode_label(&map(1, 1, 2, &[VOID]), DType::F32, &Device::Cpu)?;
        assert_eq!(t.flatten_all()?.to_vec1::<f32>()?, vec![0.0, 0.0]);
        Ok(())
    }

    #[test]
    fn one_hot_checkerboard_matches_enumeration() -> Result<()> {
        let label = map(2, 2, 2, &[0, 1, 1, 0]);
        let t = encode_label(&label, DType::F32, &Device::Cpu)?;
        let mut expected = vec![0f32; 8];
        for (i, &c) in label.classes().iter().enumerate() {
            for ch in 0..2 {
                expected[ch * 4 + i] = (c as usize == ch) as u8 as f32;
            }
        }
        assert_eq!(t.flatten_all()?.to_vec1::<f32>()?, expected);
        assert_eq!(expected, vec![1., 0., 0., 1., 0., 1., 1., 0.]);
        Ok(())
    }

    #[test]
    fn label_rejects_out_of_range() {
        assert!(LabelMap::new(1, 2, 2, vec![0, 2]).is_err());
        assert!(LabelMap::new(1, 2, 2, vec![0, VOID]).is_ok());
        assert!(LabelMap::new(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn depth_normalization_cases() -> Result<()> {
        let d = normalize_depth(&[0, 10_000, 5_000, 20_000], 1, 4, 10.0)?;
        assert_eq!(d.values(), &[-1.0, 1.0, 0.0, 1.0]);
        assert_eq!(d.valid(), &[false, true, true, true]);
        Ok(())
    }

    #[test]
    fn depth_rejects_bad_max() {
        assert!(normalize_depth(&[1], 1, 1, 0.0).is_err());
    }

    #[test]
    fn noise_shape_and_determinism() -> Result<()> {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let na = sample_noise(&mut a, NOISE_CHANNELS, 4, 8, DType::F32, &Device::Cpu)?;
        let nb = sample_noise(&mut b, NOISE_CHANNELS, 4, 8, DType::F32, &Device::Cpu)?;
        assert_eq!(na.tensor().dims(), &[64, 4, 8]);
        assert_eq!(
            na.tensor().flatten_all()?.to_vec1::<f32>()?,
            nb.tensor().flatten_all()?.to_vec1::<f32>()?
        );
        Ok(())
    }

    #[test]
    fn full_size_noise_shape() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = sample_noise(&mut rng, NOISE_CHANNELS, 256, 512, DType::F32, &Device::Cpu)?;
        assert_eq!(n.tensor().dims(), &[64, 256, 512]);
        Ok(())
    }

    #[test]
    fn noise_moments() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 64 * 125 * 125 = 1_000_000 samples
        let n = sample_noise(&mut rng, NOISE_CHANNELS, 125, 125, DType::F64, &Device::Cpu)?;
        let v = n.tensor().flatten_all()?.to_vec1::<f64>()?;
        assert_eq!(v.len(), 1_000_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        Ok(())
    }

    #[test]
    fn rgb_byte_mapping_endpoints() {
        let img = RgbBuffer::from_raw(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let rgb = RgbImage::from_rgb8(&img);
        assert_eq!(rgb.data(), &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
        assert_eq!(rgb.to_rgb8(), img);
    }
}
