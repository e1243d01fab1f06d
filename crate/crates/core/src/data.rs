//! Dataset ingestion, the synthetic generator, and map images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::{default_density_sigma, density_from_fixations, FixationSet};
use crate::tensor::Tensor;

/// Background level of synthetic images.
pub const SYNTH_BACKGROUND: f64 = 0.5;
/// Fixations drawn per synthetic image.
pub const SYNTH_FIXATIONS: usize = 15;

/// One training or evaluation example in map space.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// `[1, 3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub fixations: FixationSet,
    /// `[1, 1, S, S]`, sums to 1.
    pub density: Tensor,
}

/// Result of [`load_sample`]; `clamped` counts fixations that fell outside
/// the image and were moved to the border.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub record: SampleRecord,
    pub original_size: (u32, u32),
    pub clamped: usize,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

/// Reads an image and returns it bilinearly resized to `size x size` as a
/// `[1, 3, size, size]` tensor, with its original `(width, height)`.
pub fn load_image(path: &Path, size: usize) -> Result<(Tensor, (u32, u32))> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb32f();
    let dims = img.dimensions();
    let resized = if dims == (size as u32, size as u32) {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok((rgb_to_tensor(&resized), dims))
}

fn rgb_to_tensor(img: &Rgb32FImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        (img.get_pixel(x as u32, y as u32)[c] as f64).clamp(0.0, 1.0)
    })
}

/// Parses `x,y` lines (0-indexed pixel coordinates); blank lines and lines
/// starting with `#` are skipped.
pub fn parse_fixations(path: &Path, text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: k + 1, msg };
        let (xs, ys) = line.split_once(',').ok_or_else(|| parse_err(format!("expected `x,y`, got `{line}`")))?;
        let x: f64 = xs.trim().parse().map_err(|_| parse_err(format!("bad x `{}`", xs.trim())))?;
        let y: f64 = ys.trim().parse().map_err(|_| parse_err(format!("bad y `{}`", ys.trim())))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err("non-finite coordinate".into()));
        }
        out.push((x, y));
    }
    Ok(out)
}

/// Maps original-image coordinates into a `size x size` map, rounding to the
/// nearest pixel and clamping to the border. Returns the points and the
/// number clamped.
pub fn rescale_fixations(points: &[(f64, f64)], original: (u32, u32), size: usize) -> (Vec<(usize, usize)>, usize) {
    let (w, h) = (original.0 as f64, original.1 as f64);
    let s = size as f64;
    let mut clamped = 0;
    let out = points
        .iter()
        .map(|&(x, y)| {
            // Pixel centres map onto pixel centres.
            let (mx, my) = (((x + 0.5) * s / w - 0.5).round(), ((y + 0.5) * s / h - 0.5).round());
            let (cx, cy) = (mx.clamp(0.0, s - 1.0), my.clamp(0.0, s - 1.0));
            if (cx, cy) != (mx, my) {
                clamped += 1;
            }
            (cx as usize, cy as usize)
        })
        .collect();
    (out, clamped)
}

pub fn load_sample(image_path: &Path, fixation_path: &Path, size: usize, sigma: f64) -> Result<Loaded> {
    let (image, original) = load_image(image_path, size)?;
    let text = fs::read_to_string(fixation_path).map_err(|e| Error::io(fixation_path, e))?;
    let raw = parse_fixations(fixation_path, &text)?;
    if raw.is_empty() {
        return Err(Error::Parse { path: fixation_path.to_path_buf(), line: 0, msg: "no fixations".into() });
    }
    let (points, clamped) = rescale_fixations(&raw, original, size);
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let fixations = FixationSet::new(id, points);
    let density = density_from_fixations(&fixations, size, size, sigma)?;
    Ok(Loaded { record: SampleRecord { image, fixations, density }, original_size: original, clamped })
}

/// One `image<TAB>fixations` pair of a manifest; relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub fixations: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, fix) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg: "expected `image<TAB>fixations`".into(),
        })?;
        out.push(ManifestEntry { image: base.join(img.trim()), fixations: base.join(fix.trim()) });
    }
    if out.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), line: 0, msg: "manifest lists no samples".into() });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatchShape {
    /// Axis-aligned; `half_h <= radius`.
    Rect {
        half_h: f64,
    },
    Disk,
}

/// The salient object of a synthetic image. `radius` is the half-width of
/// a rectangle or the radius of a disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub shape: PatchShape,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub color: [f64; 3],
}

impl Patch {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            PatchShape::Rect { half_h } => dx.abs() <= self.radius && dy.abs() <= half_h,
            PatchShape::Disk => dx * dx + dy * dy <= self.radius * self.radius,
        }
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let half_h = match self.shape {
            PatchShape::Rect { half_h } => half_h,
            PatchShape::Disk => self.radius,
        };
        let lo = |c: f64, r: f64| (c - r).ceil().max(0.0) as usize;
        let hi = |c: f64, r: f64| (c + r).floor().max(0.0) as usize;
        (lo(self.cx, self.radius), lo(self.cy, half_h), hi(self.cx, self.radius), hi(self.cy, half_h))
    }

    pub fn intensity(&self) -> f64 {
        self.color.iter().sum::<f64>() / 3.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub patch: Patch,
}

/// `n` images of a single high-contrast patch on mid-gray, each with
/// fixations drawn around the patch centre.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Invalid("synthetic dataset needs n >= 1".into()));
    }
    if size < 16 {
        return Err(Error::Invalid(format!("synthetic images need size >= 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|k| synth_one(&mut rng, size, &format!("synth_{k:04}"))).collect()
}

fn synth_one(rng: &mut ChaCha8Rng, size: usize, id: &str) -> Result<SynthSample> {
    let s = size as f64;
    let radius = rng.random_range(s / 16.0..=s / 8.0);
    let shape = if rng.random_bool(0.5) {
        PatchShape::Rect { half_h: rng.random_range(radius / 2.0..=radius) }
    } else {
        PatchShape::Disk
    };
    let cx = rng.random_range(radius..=s - 1.0 - radius);
    let cy = rng.random_range(radius..=s - 1.0 - radius);
    // Bright or dark overall, with a small tint per channel.
    let level = if rng.random_bool(0.5) { rng.random_range(0.9..=1.0) } else { rng.random_range(0.0..=0.1) };
    let room = f64::min(level, 1.0 - level);
    let mut tint = [0.0f64; 3];
    for t in &mut tint {
        *t = rng.random_range(-1.0..=1.0);
    }
    let mean_tint = tint.iter().sum::<f64>() / 3.0;
    let spread = tint.iter().map(|t| (t - mean_tint).abs()).fold(0.0, f64::max).max(1e-12);
    let color = tint.map(|t| (level + (t - mean_tint) / spread * room).clamp(0.0, 1.0));
    let patch = Patch { shape, cx, cy, radius, color };

    let image = Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
        if patch.contains(x as f64, y as f64) {
            color[c]
        } else {
            SYNTH_BACKGROUND
        }
    });
    let spread = Normal::new(0.0, radius / 2.0).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut points = Vec::with_capacity(SYNTH_FIXATIONS);
    while points.len() < SYNTH_FIXATIONS {
        let (dx, dy): (f64, f64) = (spread.sample(rng), spread.sample(rng));
        if dx.hypot(dy) > 3.0 * radius {
            continue;
        }
        let px = (cx + dx).round().clamp(0.0, s - 1.0) as usize;
        let py = (cy + dy).round().clamp(0.0, s - 1.0) as usize;
        points.push((px, py));
    }
    let fixations = FixationSet::new(id, points);
    let density = density_from_fixations(&fixations, size, size, default_density_sigma(size))?;
    Ok(SynthSample { record: SampleRecord { image, fixations, density }, patch })
}

/// Writes a `[1, 3, H, W]` tensor as an 8-bit RGB PNG.
pub fn save_rgb_png(image: &Tensor, path: &Path) -> Result<()> {
    let [_, _, h, w] = image.dims();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| to_u8(image.at(0, c, y as usize, x as usize))))
    });
    buf.save(path).map_err(image_err(path))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single map as a grayscale PNG of `out_w x out_h`, bilinearly
/// resized and scaled so that its maximum is 255.
pub fn save_map_png(map: &Tensor, out_w: u32, out_h: u32, path: &Path) -> Result<()> {
    let [_, _, h, w] = map.dims();
    let plane = map.plane(0, 0);
    let src: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([plane[y as usize * w + x as usize] as f32]));
    let resized = if (out_w, out_h) == (w as u32, h as u32) {
        src
    } else {
        imageops::resize(&src, out_w, out_h, FilterType::Triangle)
    };
    let max = resized.pixels().map(|p| p[0]).fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let out = ImageBuffer::from_fn(out_w, out_h, |x, y| {
        Luma([(resized.get_pixel(x, y)[0].max(0.0) * scale).round().min(255.0) as u8])
    });
    out.save(path).map_err(image_err(path))
}

/// Writes images, fixation CSVs and a manifest into `dir`; returns the
/// manifest path.
pub fn write_dataset(samples: &[SampleRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        let id = &s.fixations.image_id;
        let img = format!("{id}.png");
        let fix = format!("{id}.csv");
        save_rgb_png(&s.image, &dir.join(&img))?;
        let mut csv = String::new();
        for &(x, y) in &s.fixations.points {
            let _ = writeln!(csv, "{x},{y}");
        }
        let p = dir.join(&fix);
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let _ = writeln!(manifest, "{img}\t{fix}");
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
