//! Directory datasets, crops and batching.
//!
//! A dataset directory holds `images/` with 8-bit rasters and an optional
//! `labels/` whose `<stem>.png` files store class indices as pixel values.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Error, Result};
use crate::losses::MaskBatch;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "ppm", "pgm", "pnm", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// One image in channel-major layout, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(dim_err(format!(
                "{} values do not fill a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Maps 8-bit intensities onto `[-1, 1]`.
    pub fn from_u8(channels: usize, height: usize, width: usize, raw_hwc: &[u8]) -> Result<Self> {
        let mut data = vec![0f32; channels * height * width];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = raw_hwc[(y * width + x) * channels + c];
                    data[(c * height + y) * width + x] = v as f32 / 127.5 - 1.0;
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Inverse of [`Image::from_u8`], rounding and clamping.
    pub fn to_u8_hwc(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = ((self.at(c, y, x) + 1.0) * 127.5).round().clamp(0.0, 255.0);
                    out[(y * self.width + x) * self.channels + c] = v as u8;
                }
            }
        }
        out
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (self.channels, self.height, self.width),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }

    /// Bilinear resampling with half-pixel centers.
    fn resize(&self, h: usize, w: usize) -> Self {
        let sy = self.height as f32 / h as f32;
        let sx = self.width as f32 / w as f32;
        let coord = |dst: usize, scale: f32, n: usize| {
            let src = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f32)
        };
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                let (y0, y1, fy) = coord(y, sy, self.height);
                for x in 0..w {
                    let (x0, x1, fx) = coord(x, sx, self.width);
                    let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
                    let bottom = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }
}

/// Class-index mask for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err(format!(
                "{} labels do not fill a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    /// Nearest-neighbour resampling, so labels stay integral.
    fn resize(&self, h: usize, w: usize) -> Self {
        let pick = |dst: usize, src_n: usize, dst_n: usize| {
            (((dst as f64 + 0.5) * src_n as f64 / dst_n as f64).floor() as usize).min(src_n - 1)
        };
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = pick(y, self.height, h);
            for x in 0..w {
                data.push(self.data[sy * self.width + pick(x, self.width, w)]);
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// File stem, used to pair images with labels and to name outputs.
    pub name: String,
    pub image: Image,
    pub label: Option<LabelMap>,
}

impl PairedSample {
    pub fn new(name: impl Into<String>, image: Image, label: Option<LabelMap>) -> Result<Self> {
        if let Some(l) = &label {
            if (l.height, l.width) != (image.height, image.width) {
                return Err(dim_err(format!(
                    "label {}x{} does not match image {}x{}",
                    l.height, l.width, image.height, image.width
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            image,
            label,
        })
    }
}

/// Batched images, `(batch, channels, height, width)`, tagged with a domain.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Tensor,
    domain: Domain,
}

impl ImageBatch {
    /// Checks rank, finiteness and the `[-1, 1]` range.
    pub fn new(data: Tensor, domain: Domain) -> Result<Self> {
        if data.rank() != 4 {
            return Err(dim_err(format!("image batch must be rank 4, got {:?}", data.dims())));
        }
        let flat = data.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        if flat.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(invalid("image values must be finite and within [-1, 1]"));
        }
        Ok(Self { data, domain })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Ingestion {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_image(path: &Path, channels: usize) -> Result<Image> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => Image::from_u8(1, h, w, img.to_luma8().as_raw()),
        3 => Image::from_u8(3, h, w, img.to_rgb8().as_raw()),
        other => Err(invalid(format!("unsupported channel count {other}"))),
    }
}

fn read_label(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw();
    if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
        return Err(invalid(format!(
            "{}: mask value {bad} is out of range for {num_classes} classes",
            path.display()
        )));
    }
    LabelMap::new(h, w, data)
}

/// Loads `root/images` (and matching `root/labels/<stem>.png`) in
/// lexicographic filename order. `num_classes` counts background.
pub fn load_directory_dataset(root: &Path, channels: usize, num_classes: usize) -> Result<Vec<PairedSample>> {
    load_dataset(root, channels, Some(num_classes))
}

/// Loads only `root/images`; any `labels/` directory is never opened.
pub fn load_unlabelled_dataset(root: &Path, channels: usize) -> Result<Vec<PairedSample>> {
    load_dataset(root, channels, None)
}

fn load_dataset(root: &Path, channels: usize, num_classes: Option<usize>) -> Result<Vec<PairedSample>> {
    let label_dir = root.join("labels");
    image_files(&root.join("images"))?
        .into_iter()
        .map(|path| {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Ingestion {
                    path: path.clone(),
                    reason: "file name is not valid UTF-8".into(),
                })?
                .to_string();
            let image = read_image(&path, channels)?;
            let label = match num_classes {
                Some(n) => {
                    let label_path = label_dir.join(format!("{stem}.png"));
                    if label_path.is_file() {
                        Some(read_label(&label_path, n)?)
                    } else {
                        None
                    }
                }
                None => None,
            };
            PairedSample::new(stem, image, label)
        })
        .collect()
}

/// Writes samples as `images/<name>.png` and `labels/<name>.png`.
pub fn write_directory_dataset(root: &Path, samples: &[PairedSample]) -> Result<()> {
    let images = root.join("images");
    let labels = root.join("labels");
    fs::create_dir_all(&images)?;
    for s in samples {
        save_image(&images.join(format!("{}.png", s.name)), &s.image)?;
        if let Some(label) = &s.label {
            fs::create_dir_all(&labels)?;
            save_label(&labels.join(format!("{}.png", s.name)), label)?;
        }
    }
    Ok(())
}

fn image_write_err(path: &Path, e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let raw = img.to_u8_hwc();
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match img.channels {
        1 => GrayImage::from_raw(w, h, raw).map(|b| b.save(path)),
        3 => RgbImage::from_raw(w, h, raw).map(|b| b.save(path)),
        other => return Err(invalid(format!("cannot write a {other}-channel image"))),
    };
    res.expect("buffer sized from image dims")
        .map_err(|e| image_write_err(path, e))
}

pub fn save_label(path: &Path, label: &LabelMap) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(label.width as u32, label.height as u32, label.data.clone())
            .expect("buffer sized from label dims");
    buf.save(path).map_err(|e| image_write_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    Random,
    Center,
    /// Four crops anchored at the image corners.
    QuadrantTile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    #[serde(default)]
    pub resize_to: Option<(usize, usize)>,
    pub kind: CropKind,
    pub size: (usize, usize),
}

impl CropSpec {
    pub fn center(h: usize, w: usize) -> Self {
        Self {
            resize_to: None,
            kind: CropKind::Center,
            size: (h, w),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(invalid("crop size must be positive"));
        }
        if let Some((h, w)) = self.resize_to {
            if h == 0 || w == 0 {
                return Err(invalid("resize target must be positive"));
            }
            if self.size.0 > h || self.size.1 > w {
                return Err(invalid(format!(
                    "crop {:?} exceeds resize target {:?}",
                    self.size,
                    (h, w)
                )));
            }
        }
        Ok(())
    }

    /// Number of patches emitted per input image.
    pub fn patches_per_image(&self) -> usize {
        match self.kind {
            CropKind::QuadrantTile => 4,
            _ => 1,
        }
    }
}

/// Resizes (bilinear image, nearest label) then crops. Random offsets depend
/// only on `rng_seed`.
pub fn apply_crop(sample: &PairedSample, spec: &CropSpec, rng_seed: u64) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let (image, label) = match spec.resize_to {
        Some((h, w)) if (h, w) != (sample.image.height, sample.image.width) => (
            sample.image.resize(h, w),
            sample.label.as_ref().map(|l| l.resize(h, w)),
        ),
        _ => (sample.image.clone(), sample.label.clone()),
    };
    let (ih, iw) = (image.height, image.width);
    let (ch, cw) = spec.size;
    if ch > ih || cw > iw {
        return Err(dim_err(format!(
            "crop {ch}x{cw} is larger than image {ih}x{iw} ({})",
            sample.name
        )));
    }
    let cut = |top: usize, left: usize, name: String| PairedSample {
        name,
        image: image.crop(top, left, ch, cw),
        label: label.as_ref().map(|l| l.crop(top, left, ch, cw)),
    };
    Ok(match spec.kind {
        CropKind::Center => vec![cut((ih - ch) / 2, (iw - cw) / 2, sample.name.clone())],
        CropKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let top = rng.random_range(0..=ih - ch);
            let left = rng.random_range(0..=iw - cw);
            vec![cut(top, left, sample.name.clone())]
        }
        CropKind::QuadrantTile => [(0, 0), (0, iw - cw), (ih - ch, 0), (ih - ch, iw - cw)]
            .iter()
            .enumerate()
            .map(|(q, &(top, left))| cut(top, left, format!("{}_q{q}", sample.name)))
            .collect(),
    })
}

/// Crops every sample; random crops draw their seed from `(seed, index)`.
pub fn crop_all(samples: &[PairedSample], spec: &CropSpec, seed: u64) -> Result<Vec<PairedSample>> {
    let mut out = Vec::with_capacity(samples.len() * spec.patches_per_image());
    for (i, s) in samples.iter().enumerate() {
        out.extend(apply_crop(s, spec, mix_seed(seed, i as u64))?);
    }
    Ok(out)
}

/// Deterministic seed derivation (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One batch: images plus masks when every sample in it is labelled.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: ImageBatch,
    pub masks: Option<MaskBatch>,
    pub names: Vec<String>,
}

/// Stacks samples into a batch. All samples must share their dimensions.
pub fn collate(
    samples: &[&PairedSample],
    domain: Domain,
    num_classes: usize,
    device: &Device,
) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| invalid("cannot collate an empty batch"))?;
    let (c, h, w) = (first.image.channels, first.image.height, first.image.width);
    let mut pixels = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    let mut all_labelled = true;
    for s in samples {
        if (s.image.channels, s.image.height, s.image.width) != (c, h, w) {
            return Err(dim_err(format!(
                "sample {} is {}x{}x{}, batch is {c}x{h}x{w}",
                s.name, s.image.channels, s.image.height, s.image.width
            )));
        }
        pixels.extend_from_slice(&s.image.data);
        match &s.label {
            Some(l) => labels.extend(l.data.iter().map(|&v| v as u32)),
            None => all_labelled = false,
        }
    }
    let n = samples.len();
    let images = Tensor::from_vec(pixels, (n, c, h, w), device)?;
    let masks = if all_labelled {
        Some(MaskBatch::from_vec(labels, (n, h, w), num_classes, device)?)
    } else {
        None
    };
    Ok(Batch {
        images: ImageBatch { data: images, domain },
        masks,
        names: samples.iter().map(|s| s.name.clone()).collect(),
    })
}

/// Shuffled mini-batches over a dataset; the order is a pure function of
/// `(shuffle_seed, epoch)` and the final partial batch is kept.
#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    samples: &'a [PairedSample],
    batch_size: usize,
    shuffle_seed: u64,
    domain: Domain,
    num_classes: usize,
    device: Device,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        samples: &'a [PairedSample],
        batch_size: usize,
        shuffle_seed: u64,
        domain: Domain,
        num_classes: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if samples.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        Ok(Self {
            samples,
            batch_size,
            shuffle_seed,
            domain,
            num_classes,
            device: Device::Cpu,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Sample indices for `epoch`, in delivery order.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        shuffled_indices(self.samples.len(), self.shuffle_seed, epoch)
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |idx| {
            let picked: Vec<&PairedSample> = idx.iter().map(|&i| &self.samples[i]).collect();
            collate(&picked, self.domain, self.num_classes, &self.device)
        })
    }
}

pub fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
