//! Procedural two-domain datasets with exact masks.
//!
//! Both domains render the same family of structures: thin curved "vessels"
//! (one foreground class) or a disk inside a ring (two foreground classes,
//! laid out like a left ventricle inside its myocardium). Domain A colours a
//! shared intensity field directly; domain B applies a fixed, invertible
//! appearance shift to it (intensity inversion, per-channel gain and offset,
//! and an additive background texture that depends only on the spec seed).

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, write_directory_dataset, Image, LabelMap, PairedSample};
use crate::error::{invalid, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Appearance change from domain A to domain B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub invert: bool,
    /// Per-channel gain, one entry per image channel.
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub texture_amplitude: f64,
}

impl ShiftSpec {
    pub fn default_for(channels: usize) -> Self {
        let (gain, offset) = if channels == 1 {
            (vec![0.7], vec![0.15])
        } else {
            (vec![0.7, 0.65, 0.6], vec![0.12, 0.2, 0.25])
        };
        Self {
            invert: true,
            gain,
            offset,
            texture_amplitude: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub channels: usize,
    /// 1 renders vessel-like curves, 2 renders a disk (class 1) in a ring (class 2).
    pub foreground_classes: usize,
    /// Training samples per domain; domain B sample k shares the geometry of
    /// domain A sample k.
    pub n_train: usize,
    /// Held-out domain-B samples with fresh geometry.
    pub n_test: usize,
    pub seed: u64,
    pub shift: ShiftSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            foreground_classes: 1,
            n_train: 40,
            n_test: 40,
            seed: 0,
            shift: ShiftSpec::default_for(3),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(invalid("image_size must be >= 16"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(invalid("channels must be 1 or 3"));
        }
        if !(1..=2).contains(&self.foreground_classes) {
            return Err(invalid("foreground_classes must be 1 or 2"));
        }
        if self.n_train == 0 {
            return Err(invalid("n_train must be >= 1"));
        }
        let s = &self.shift;
        if s.gain.len() != self.channels || s.offset.len() != self.channels {
            return Err(invalid("shift gain/offset need one entry per channel"));
        }
        if s.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(invalid("shift gains must be positive"));
        }
        if !(0.0..=0.1).contains(&s.texture_amplitude) {
            return Err(invalid("texture_amplitude must lie in [0, 0.1]"));
        }
        // keep the shifted image inside [0, 1] so nothing is clipped
        for (g, o) in s.gain.iter().zip(&s.offset) {
            let lo = o - s.texture_amplitude;
            let hi = g * INTENSITY_MAX + o + s.texture_amplitude;
            if lo < 0.0 || hi > 1.0 {
                return Err(invalid("shift would clip intensities outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Number of label values, background included.
    pub fn label_classes(&self) -> usize {
        self.foreground_classes + 1
    }

    fn colour(&self) -> &'static [f64] {
        if self.channels == 1 {
            &[1.0]
        } else {
            &[1.0, 0.8, 0.6]
        }
    }

    /// Fixed texture field in `[-1, 1]`, a function of position and seed only.
    fn texture(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0x7e47));
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random_range(0.0..TAU)))
            .collect();
        let n = self.image_size;
        let mut field = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                let s: f64 = waves.iter().map(|(kx, ky, p)| (TAU * (kx * u + ky * v) + p).sin()).sum();
                field[y * n + x] = s / waves.len() as f64;
            }
        }
        field
    }

    fn domain_a(&self, v: &[f64]) -> Result<Image> {
        let n = self.image_size;
        let colour = self.colour();
        let mut data = Vec::with_capacity(self.channels * n * n);
        for &c in colour {
            data.extend(v.iter().map(|&x| (2.0 * x * c - 1.0) as f32));
        }
        Image::new(self.channels, n, n, data)
    }

    fn domain_b(&self, v: &[f64], texture: &[f64]) -> Result<Image> {
        let n = self.image_size;
        let s = &self.shift;
        let mut data = Vec::with_capacity(self.channels * n * n);
        for c in 0..self.channels {
            data.extend(v.iter().zip(texture).map(|(&x, &t)| {
                let u = if s.invert { 1.0 - x } else { x };
                let b = s.gain[c] * u + s.offset[c] + s.texture_amplitude * t;
                (2.0 * b - 1.0) as f32
            }));
        }
        Image::new(self.channels, n, n, data)
    }

    /// Undoes the appearance shift: maps a domain-B image back to domain A.
    pub fn invert_shift(&self, b: &Image) -> Result<Image> {
        let n = self.image_size;
        if (b.channels, b.height, b.width) != (self.channels, n, n) {
            return Err(crate::error::dim_err("image does not match the synthetic spec"));
        }
        let s = &self.shift;
        let texture = self.texture();
        let v: Vec<f64> = (0..n * n)
            .map(|i| {
                let u: f64 = (0..self.channels)
                    .map(|c| {
                        let val = (b.data[c * n * n + i] as f64 + 1.0) / 2.0;
                        (val - s.offset[c] - s.texture_amplitude * texture[i]) / s.gain[c]
                    })
                    .sum::<f64>()
                    / self.channels as f64;
                if s.invert {
                    1.0 - u
                } else {
                    u
                }
            })
            .collect();
        self.domain_a(&v)
    }
}

const BACKGROUND: f64 = 0.25;
const INTENSITY_MAX: f64 = 0.9;

/// Intensity field in `[0, 1]` and its label map for one geometry seed.
fn render(spec: &SynthSpec, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; n * n];
    let mut v = background(&mut rng, n);
    if spec.foreground_classes == 1 {
        draw_vessels(&mut rng, n, &mut labels);
        for (x, &l) in v.iter_mut().zip(&labels) {
            if l == 1 {
                *x = 0.85;
            }
        }
    } else {
        draw_heart(&mut rng, n, &mut labels);
        for (x, &l) in v.iter_mut().zip(&labels) {
            match l {
                1 => *x = 0.85,
                2 => *x = 0.55,
                _ => {}
            }
        }
    }
    (blur(&v, n), labels)
}

fn background(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, w) = (x as f64 / n as f64, y as f64 / n as f64);
            out[y * n + x] = BACKGROUND
                + waves
                    .iter()
                    .map(|(kx, ky, p, a)| a * (TAU * (kx * u + ky * w) + p).sin())
                    .sum::<f64>();
        }
    }
    out
}

/// Smooth random walks painted with a disk brush.
fn draw_vessels(rng: &mut ChaCha8Rng, n: usize, labels: &mut [u8]) {
    let turn = Normal::new(0.0, 0.12).expect("valid std");
    let curves = rng.random_range(3..=5);
    let nf = n as f64;
    for _ in 0..curves {
        let mut px = rng.random_range(0.1..0.9) * nf;
        let mut py = rng.random_range(0.1..0.9) * nf;
        let mut heading = rng.random_range(0.0..TAU);
        let mut bend = 0.0f64;
        let radius = rng.random_range(1.1..1.8);
        let steps = rng.random_range((nf * 0.8) as usize..(nf * 1.6) as usize);
        for _ in 0..steps {
            paint_disk(labels, n, px, py, radius, 1);
            bend = (bend + turn.sample(rng)).clamp(-0.15, 0.15);
            heading += bend;
            px += 0.7 * heading.cos();
            py += 0.7 * heading.sin();
            if px < -radius || py < -radius || px > nf + radius || py > nf + radius {
                break;
            }
        }
    }
}

fn paint_disk(labels: &mut [u8], n: usize, cx: f64, cy: f64, r: f64, class: u8) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil().max(0.0) as usize).min(n - 1);
    let y1 = ((cy + r).ceil().max(0.0) as usize).min(n - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                labels[y * n + x] = class;
            }
        }
    }
}

/// Elliptical disk (class 1) surrounded by a ring (class 2).
fn draw_heart(rng: &mut ChaCha8Rng, n: usize, labels: &mut [u8]) {
    let nf = n as f64;
    let cx = rng.random_range(0.35..0.65) * nf;
    let cy = rng.random_range(0.35..0.65) * nf;
    let inner = rng.random_range(0.12..0.2) * nf;
    let ring = rng.random_range(0.05..0.09) * nf;
    let (sx, sy) = (rng.random_range(0.85..1.15), rng.random_range(0.85..1.15));
    for y in 0..n {
        for x in 0..n {
            let dx = (x as f64 + 0.5 - cx) / sx;
            let dy = (y as f64 + 0.5 - cy) / sy;
            let d = (dx * dx + dy * dy).sqrt();
            labels[y * n + x] = if d <= inner {
                1
            } else if d <= inner + ring {
                2
            } else {
                0
            };
        }
    }
}

/// Separable `[1, 2, 1] / 4` blur with clamped borders.
fn blur(v: &[f64], n: usize) -> Vec<f64> {
    let at = |buf: &[f64], x: isize, y: isize| {
        let cx = x.clamp(0, n as isize - 1) as usize;
        let cy = y.clamp(0, n as isize - 1) as usize;
        buf[cy * n + cx]
    };
    let mut tmp = vec![0.0; n * n];
    for y in 0..n as isize {
        for x in 0..n as isize {
            tmp[y as usize * n + x as usize] =
                (at(v, x - 1, y) + 2.0 * at(v, x, y) + at(v, x + 1, y)) / 4.0;
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n as isize {
        for x in 0..n as isize {
            out[y as usize * n + x as usize] =
                ((at(&tmp, x, y - 1) + 2.0 * at(&tmp, x, y) + at(&tmp, x, y + 1)) / 4.0)
                    .min(INTENSITY_MAX);
        }
    }
    out
}

/// In-memory synthetic splits.
#[derive(Debug, Clone)]
pub struct SyntheticDomains {
    pub source: Vec<PairedSample>,
    pub target: Vec<PairedSample>,
    pub target_test: Vec<PairedSample>,
}

pub fn synthesize(spec: &SynthSpec) -> Result<SyntheticDomains> {
    spec.validate()?;
    let n = spec.image_size;
    let texture = spec.texture();
    let label = |l: Vec<u8>| LabelMap::new(n, n, l);
    let mut source = Vec::with_capacity(spec.n_train);
    let mut target = Vec::with_capacity(spec.n_train);
    for k in 0..spec.n_train {
        let (v, labels) = render(spec, mix_seed(spec.seed, k as u64));
        let name = format!("{k:04}");
        source.push(PairedSample::new(format!("a_{name}"), spec.domain_a(&v)?, Some(label(labels.clone())?))?);
        target.push(PairedSample::new(format!("b_{name}"), spec.domain_b(&v, &texture)?, Some(label(labels)?))?);
    }
    let target_test = (0..spec.n_test)
        .map(|k| {
            let (v, labels) = render(spec, mix_seed(spec.seed ^ 0x7e57_7e57, k as u64));
            PairedSample::new(format!("t_{k:04}"), spec.domain_b(&v, &texture)?, Some(label(labels)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDomains {
        source,
        target,
        target_test,
    })
}

/// Paths written by [`generate_synthetic_domains`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub seed: u64,
    pub source: PathBuf,
    pub target: PathBuf,
    pub target_test: PathBuf,
}

/// Writes `source/`, `target/` and `target_test/` directory datasets plus a
/// manifest under `out_dir`, returning the manifest path.
pub fn generate_synthetic_domains(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    let domains = synthesize(spec)?;
    fs::create_dir_all(out_dir)?;
    write_directory_dataset(&out_dir.join("source"), &domains.source)?;
    write_directory_dataset(&out_dir.join("target"), &domains.target)?;
    write_directory_dataset(&out_dir.join("target_test"), &domains.target_test)?;
    let manifest = SynthManifest {
        spec: spec.clone(),
        seed: spec.seed,
        source: "source".into(),
        target: "target".into(),
        target_test: "target_test".into(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}
