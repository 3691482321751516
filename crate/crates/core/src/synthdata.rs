//! Procedural generator for normal samples and anomaly triples, plus the
//! on-disk dataset format. Anomaly masks are stored after the same
//! close-then-filter pipeline the extractor applies, so extraction recovers
//! them exactly.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::maskgen::{area_filter, close, connected_components};
pub use crate::types::{AnomalyType, BinaryMask, Image, ObjectKind, SamplePair};

/// Per-channel color interval in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorRange {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl ColorRange {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = if self.hi[i] > self.lo[i] {
                rng.gen_range(self.lo[i]..self.hi[i])
            } else {
                self.lo[i]
            };
        }
        c
    }

    fn valid(&self) -> bool {
        (0..3).all(|i| {
            (0.0..=1.0).contains(&self.lo[i])
                && (0.0..=1.0).contains(&self.hi[i])
                && self.lo[i] <= self.hi[i]
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub object_kind: ObjectKind,
    pub anomaly_type: AnomalyType,
    pub count: usize,
    pub rng_seed: u64,
    pub background_color: ColorRange,
    pub object_color: ColorRange,
    pub anomaly_color: ColorRange,
}

impl DatasetSpec {
    pub fn desk_default(anomaly_type: AnomalyType, count: usize, rng_seed: u64) -> Self {
        DatasetSpec {
            image_size: 64,
            object_kind: ObjectKind::Disk,
            anomaly_type,
            count,
            rng_seed,
            // Backgrounds keep max-channel ≥ 0.16 so "missing" bites painted
            // in the background color still clear the extraction threshold.
            background_color: ColorRange { lo: [0.16, 0.16, 0.18], hi: [0.24, 0.24, 0.28] },
            object_color: ColorRange { lo: [0.55, 0.50, 0.40], hi: [0.85, 0.80, 0.70] },
            anomaly_color: ColorRange { lo: [0.60, 0.15, 0.15], hi: [0.95, 0.35, 0.35] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(CoreError::Config("dataset count must be ≥ 1".into()));
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(CoreError::Config(format!(
                "image_size must be a power of two ≥ 32, got {}",
                self.image_size
            )));
        }
        for (name, r) in [
            ("background_color", &self.background_color),
            ("object_color", &self.object_color),
            ("anomaly_color", &self.anomaly_color),
        ] {
            if !r.valid() {
                return Err(CoreError::Config(format!("{name} interval outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Rasterize the object shape. Center is jittered ±10% of width, radius (or
/// half-extent) drawn from 25–40% of width. Hard edges, no antialiasing.
fn rasterize_object<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> BinaryMask {
    let s = spec.image_size as f64;
    let cx = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let r = rng.gen_range(0.25..0.40) * s;
    let mut mask = BinaryMask::empty(spec.image_size, spec.image_size);
    match spec.object_kind {
        ObjectKind::Disk => {
            for y in 0..spec.image_size {
                for x in 0..spec.image_size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        mask.pixels[[y, x]] = 1;
                    }
                }
            }
        }
        ObjectKind::RoundedSquare => {
            let corner = 0.3 * r;
            for y in 0..spec.image_size {
                for x in 0..spec.image_size {
                    let dx = (x as f64 + 0.5 - cx).abs() - (r - corner);
                    let dy = (y as f64 + 0.5 - cy).abs() - (r - corner);
                    let (px, py) = (dx.max(0.0), dy.max(0.0));
                    if px * px + py * py <= corner * corner {
                        mask.pixels[[y, x]] = 1;
                    }
                }
            }
        }
    }
    mask
}

/// One normal sample: a single object on a uniform background.
pub fn make_normal_sample(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<(Image, BinaryMask)> {
    spec.validate()?;
    let bg = spec.background_color.sample(rng);
    let fg = spec.object_color.sample(rng);
    let object_mask = rasterize_object(spec, rng);
    let mut image = Image::filled(spec.image_size, spec.image_size, bg);
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            if object_mask.pixels[[y, x]] != 0 {
                for c in 0..3 {
                    image.pixels[[y, x, c]] = fg[c];
                }
            }
        }
    }
    Ok((image, object_mask))
}

/// Paint a raw pixel set for one anomaly proposal (pre-morphology).
fn propose_anomaly<R: Rng>(
    ty: AnomalyType,
    object_mask: &BinaryMask,
    rng: &mut R,
) -> Array2<u8> {
    let (h, w) = object_mask.pixels.dim();
    let size = w as f64;
    // Object centroid and rough radius for placement.
    let (mut cy, mut cx, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if object_mask.pixels[[y, x]] != 0 {
                cy += y as f64;
                cx += x as f64;
                n += 1;
            }
        }
    }
    let (cy, cx) = (cy / n.max(1) as f64, cx / n.max(1) as f64);
    let obj_r = (n as f64 / std::f64::consts::PI).sqrt();
    let mut raw = Array2::<u8>::zeros((h, w));
    let paint_disk = |raw: &mut Array2<u8>, py: f64, px: f64, rad: f64| {
        let r0 = rad.ceil() as isize;
        for dy in -r0..=r0 {
            for dx in -r0..=r0 {
                if (dy * dy + dx * dx) as f64 <= rad * rad {
                    let (yy, xx) = (py.round() as isize + dy, px.round() as isize + dx);
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        raw[[yy as usize, xx as usize]] = 1;
                    }
                }
            }
        }
    };
    match ty {
        AnomalyType::Scratch => {
            // Thin polyline: a straight-ish walk with a few direction breaks.
            let mut y = cy + rng.gen_range(-0.4..0.4) * obj_r;
            let mut x = cx + rng.gen_range(-0.4..0.4) * obj_r;
            let mut dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let thickness = if rng.gen_bool(0.5) { 0.5 } else { 1.0 };
            let steps = rng.gen_range(10..=(0.6 * obj_r).max(11.0) as usize + 10);
            for i in 0..steps {
                paint_disk(&mut raw, y, x, thickness);
                if i % 7 == 6 {
                    dir += rng.gen_range(-0.9..0.9);
                }
                y += dir.sin();
                x += dir.cos();
            }
        }
        AnomalyType::Spot => {
            let a = rng.gen_range(0.15..0.30) * obj_r;
            let b = rng.gen_range(0.15..0.30) * obj_r;
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let sy = cy + rng.gen_range(-0.4..0.4) * obj_r;
            let sx = cx + rng.gen_range(-0.4..0.4) * obj_r;
            let (ct, st) = (theta.cos(), theta.sin());
            for yy in 0..h {
                for xx in 0..w {
                    let dy = yy as f64 + 0.5 - sy;
                    let dx = xx as f64 + 0.5 - sx;
                    let u = (dx * ct + dy * st) / a;
                    let v = (-dx * st + dy * ct) / b;
                    if u * u + v * v <= 1.0 {
                        raw[[yy, xx]] = 1;
                    }
                }
            }
        }
        AnomalyType::Crack => {
            // Jagged single-pixel walk, heavier direction noise than a scratch.
            let mut y = cy + rng.gen_range(-0.3..0.3) * obj_r;
            let mut x = cx + rng.gen_range(-0.3..0.3) * obj_r;
            let mut dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let steps = rng.gen_range(12..=(0.9 * obj_r) as usize + 13);
            for _ in 0..steps {
                paint_disk(&mut raw, y, x, 0.5);
                dir += rng.gen_range(-0.6..0.6);
                y += dir.sin();
                x += dir.cos();
            }
        }
        AnomalyType::Missing => {
            // Interior bite, well away from the object boundary so the closed
            // mask stays inside it.
            let a = rng.gen_range(0.18..0.32) * obj_r;
            let b = rng.gen_range(0.18..0.32) * obj_r;
            let place = rng.gen_range(0.0..0.45) * obj_r;
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let sy = cy + place * ang.sin();
            let sx = cx + place * ang.cos();
            for yy in 0..h {
                for xx in 0..w {
                    let dy = yy as f64 + 0.5 - sy;
                    let dx = xx as f64 + 0.5 - sx;
                    if (dy / b) * (dy / b) + (dx / a) * (dx / a) <= 1.0 {
                        raw[[yy, xx]] = 1;
                    }
                }
            }
        }
    }
    let _ = size;
    raw
}

/// One anomaly sample with all decompositions. Placement is rejection-sampled
/// (≤ 100 attempts) until the closed, filtered mask is nonempty, at least
/// 8 px, and fully inside the object mask.
pub fn make_anomaly_sample(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
    spec.validate()?;
    let seed = rng.gen::<u64>();
    let mut srng = ChaCha8Rng::seed_from_u64(seed);
    let bg = spec.background_color.sample(&mut srng);
    let fg = spec.object_color.sample(&mut srng);
    let object_mask = rasterize_object(spec, &mut srng);

    let mut anomaly_mask = None;
    for _ in 0..100 {
        let raw = propose_anomaly(spec.anomaly_type, &object_mask, &mut srng);
        let closed = close(&raw, 1);
        let filtered = area_filter(&closed, 4);
        let candidate = BinaryMask { pixels: filtered };
        if candidate.area() >= 8 && candidate.subset_of(&object_mask) {
            anomaly_mask = Some(candidate);
            break;
        }
    }
    let anomaly_mask = anomaly_mask.ok_or_else(|| {
        CoreError::Data(format!(
            "anomaly placement failed after 100 attempts (type {})",
            spec.anomaly_type.label()
        ))
    })?;

    // Assemble I: background, object, anomaly painted exactly on the stored mask.
    let paint = match spec.anomaly_type {
        AnomalyType::Missing => bg,
        _ => spec.anomaly_color.sample(&mut srng),
    };
    let mut image = Image::filled(spec.image_size, spec.image_size, bg);
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            let color = if anomaly_mask.pixels[[y, x]] != 0 {
                paint
            } else if object_mask.pixels[[y, x]] != 0 {
                fg
            } else {
                bg
            };
            for c in 0..3 {
                image.pixels[[y, x, c]] = color[c];
            }
        }
    }
    let anomaly_part = image.masked(&anomaly_mask);
    let background = image.masked_complement(&object_mask);
    Ok(SamplePair {
        image,
        anomaly_mask,
        anomaly_part,
        object_mask,
        background,
        anomaly_type: spec.anomaly_type.label().to_string(),
        seed,
    })
}

/// Generate `spec.count` anomaly samples from the spec's seed.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SamplePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    (0..spec.count).map(|_| make_anomaly_sample(spec, &mut rng)).collect()
}

// ---------------------------------------------------------------------------
// Dataset directory format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub count: usize,
    pub anomaly_type: String,
    pub seeds: Vec<u64>,
}

fn png_path(dir: &Path, i: usize, kind: &str) -> std::path::PathBuf {
    dir.join(format!("{i}_{kind}.png"))
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((img.pixels[[y, x, c]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| CoreError::Data(format!("writing {}: {e}", path.display())))
}

pub fn write_gray(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let buf: Vec<u8> = mask.pixels.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8)
        .map_err(|e| CoreError::Data(format!("writing {}: {e}", path.display())))
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| CoreError::Data(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = ndarray::Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                px[[y, x, c]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(Image::new(px))
}

pub fn read_gray_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| CoreError::Data(format!("reading {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            px[[y, x]] = if img.get_pixel(x as u32, y as u32).0[0] >= 128 { 1 } else { 0 };
        }
    }
    Ok(BinaryMask { pixels: px })
}

/// Write samples plus `manifest.json`. Images are quantized to 8 bits here.
pub fn write_dataset(samples: &[SamplePair], dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_rgb(&png_path(dir, i, "image"), &s.image)?;
        write_rgb(&png_path(dir, i, "anomaly_part"), &s.anomaly_part)?;
        write_rgb(&png_path(dir, i, "background"), &s.background)?;
        write_gray(&png_path(dir, i, "anomaly_mask"), &s.anomaly_mask)?;
        write_gray(&png_path(dir, i, "object_mask"), &s.object_mask)?;
    }
    let manifest = DatasetManifest {
        image_size: samples.first().map(|s| s.image.height()).unwrap_or(0),
        count: samples.len(),
        anomaly_type: samples
            .first()
            .map(|s| s.anomaly_type.clone())
            .unwrap_or_else(|| "none".into()),
        seeds: samples.iter().map(|s| s.seed).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Data(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Read a dataset directory back; errors name the first missing piece.
pub fn read_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| CoreError::Data(format!("missing manifest.json in {}: {e}", dir.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::Data(format!("malformed manifest.json: {e}")))?;
    if manifest.seeds.len() != manifest.count {
        return Err(CoreError::Data(format!(
            "manifest count {} does not match {} seeds",
            manifest.count,
            manifest.seeds.len()
        )));
    }
    let mut out = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        for kind in ["image", "anomaly_part", "background", "anomaly_mask", "object_mask"] {
            let p = png_path(dir, i, kind);
            if !p.exists() {
                return Err(CoreError::Data(format!("missing file {}", p.display())));
            }
        }
        out.push(SamplePair {
            image: read_rgb(&png_path(dir, i, "image"))?,
            anomaly_part: read_rgb(&png_path(dir, i, "anomaly_part"))?,
            background: read_rgb(&png_path(dir, i, "background"))?,
            anomaly_mask: read_gray_mask(&png_path(dir, i, "anomaly_mask"))?,
            object_mask: read_gray_mask(&png_path(dir, i, "object_mask"))?,
            anomaly_type: manifest.anomaly_type.clone(),
            seed: manifest.seeds[i],
        });
    }
    Ok(out)
}

/// Single connected anomaly component check used by tests and diagnostics.
pub fn is_single_component(mask: &BinaryMask) -> bool {
    connected_components(&mask.pixels).1 == 1
}

// ---------------------------------------------------------------------------
// Normal-sample set directory format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct NormalSetManifest {
    pub image_size: usize,
    pub count: usize,
}

/// Write defect-free samples (image + object mask) plus `manifest.json`.
pub fn write_normal_set(samples: &[(Image, BinaryMask)], dir: &Path) -> Result<NormalSetManifest> {
    std::fs::create_dir_all(dir)?;
    for (i, (img, obj)) in samples.iter().enumerate() {
        write_rgb(&png_path(dir, i, "image"), img)?;
        write_gray(&png_path(dir, i, "object_mask"), obj)?;
    }
    let manifest = NormalSetManifest {
        image_size: samples.first().map(|(img, _)| img.height()).unwrap_or(0),
        count: samples.len(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Data(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Read a normal-sample set back; errors name the first missing piece.
pub fn read_normal_set(dir: &Path) -> Result<Vec<(Image, BinaryMask)>> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| CoreError::Data(format!("missing manifest.json in {}: {e}", dir.display())))?;
    let manifest: NormalSetManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::Data(format!("malformed manifest.json: {e}")))?;
    let mut out = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        out.push((
            read_rgb(&png_path(dir, i, "image"))?,
            read_gray_mask(&png_path(dir, i, "object_mask"))?,
        ));
    }
    Ok(out)
}
