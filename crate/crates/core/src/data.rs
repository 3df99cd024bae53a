//! Dataset loading in the MVTec AD directory layout, a seeded synthetic
//! texture generator, and PNG output.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{IntraError, Result};
use crate::image::{Image, Plane};

/// Images are always loaded with this many channels.
pub const CHANNELS: usize = 3;
pub const MASK_THRESHOLD: f32 = 0.5;
pub const GOOD: &str = "good";

/// Working resolution per MVTec AD category.
pub const CATEGORY_SIZES: [(&str, usize); 15] = [
    ("bottle", 256),
    ("cable", 256),
    ("capsule", 320),
    ("carpet", 512),
    ("grid", 256),
    ("hazelnut", 256),
    ("leather", 512),
    ("metal_nut", 256),
    ("pill", 512),
    ("screw", 320),
    ("tile", 512),
    ("toothbrush", 256),
    ("transistor", 256),
    ("wood", 512),
    ("zipper", 512),
];

pub fn category_size(category: &str) -> Option<usize> {
    CATEGORY_SIZES.iter().find(|(c, _)| *c == category).map(|&(_, s)| s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    /// File stem, e.g. `000`.
    pub name: String,
    pub defect: String,
    pub anomalous: bool,
    /// Resized to the working resolution.
    pub image: Image,
    /// Binary ground truth at the original resolution; `None` for normal images.
    pub mask: Option<Plane>,
    pub original_size: (usize, usize),
}

impl TestSample {
    /// Ground truth at the original resolution, all zero for normal images.
    pub fn ground_truth(&self) -> Plane {
        match &self.mask {
            Some(m) => m.clone(),
            None => Plane::filled(self.original_size.0, self.original_size.1, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub category: String,
    pub image_size: usize,
    pub train: Vec<Image>,
    pub train_names: Vec<String>,
    pub test: Vec<TestSample>,
}

impl Dataset {
    pub fn image_labels(&self) -> Vec<bool> {
        self.test.iter().map(|s| s.anomalous).collect()
    }

    /// Same dataset at another working resolution. Masks are untouched.
    pub fn resized(&self, size: usize) -> Dataset {
        Dataset {
            category: self.category.clone(),
            image_size: size,
            train: self.train.iter().map(|i| i.resize_bilinear(size, size)).collect(),
            train_names: self.train_names.clone(),
            test: self
                .test
                .iter()
                .map(|s| TestSample {
                    image: s.image.resize_bilinear(size, size),
                    ..s.clone()
                })
                .collect(),
        }
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| IntraError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes an 8- or 16-bit PNG to unit-range RGB; gray is broadcast.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = decode(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    Image::new(h as usize, w as usize, CHANNELS, img.into_raw())
}

/// Decodes a mask by luma and binarizes it.
pub fn load_mask(path: &Path) -> Result<Plane> {
    let img = decode(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Plane::new(h as usize, w as usize, data)
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(IntraError::Dataset(format!("expected directory {}", path.display())))
    }
}

fn sorted_entries(dir: &Path, dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| IntraError::io(dir, e))? {
        let path = entry.map_err(|e| IntraError::io(dir, e))?.path();
        let keep = if dirs {
            path.is_dir()
        } else {
            path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `<root>/<category>` with images resized to `size x size`.
pub fn load_category(root: &Path, category: &str, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(IntraError::invalid("working size must be positive"));
    }
    let base = root.join(category);
    let train_dir = base.join("train").join(GOOD);
    let test_dir = base.join("test");
    let gt_dir = base.join("ground_truth");
    require_dir(&train_dir)?;
    require_dir(&test_dir)?;

    let train_files = sorted_entries(&train_dir, false)?;
    let train = train_files
        .par_iter()
        .map(|p| Ok(load_image(p)?.resize_bilinear(size, size)))
        .collect::<Result<Vec<_>>>()?;

    // (defect, image path, mask path)
    let mut jobs: Vec<(String, PathBuf, Option<PathBuf>)> = Vec::new();
    for defect_dir in sorted_entries(&test_dir, true)? {
        let defect = file_name(&defect_dir);
        let images = sorted_entries(&defect_dir, false)?;
        if defect == GOOD {
            jobs.extend(images.into_iter().map(|p| (defect.clone(), p, None)));
            continue;
        }
        let mask_dir = gt_dir.join(&defect);
        require_dir(&mask_dir)?;
        let masks = sorted_entries(&mask_dir, false)?;
        for m in &masks {
            let s = stem(m);
            let img_stem = s.strip_suffix("_mask").unwrap_or(&s);
            if !images.iter().any(|p| stem(p) == img_stem) {
                return Err(IntraError::Dataset(format!("mask {} has no matching test image", m.display())));
            }
        }
        for p in images {
            let mask = mask_dir.join(format!("{}_mask.png", stem(&p)));
            if !mask.is_file() {
                return Err(IntraError::Dataset(format!("test image {} has no mask, expected {}", p.display(), mask.display())));
            }
            jobs.push((defect.clone(), p, Some(mask)));
        }
    }

    let test = jobs
        .par_iter()
        .map(|(defect, path, mask_path)| {
            let img = load_image(path)?;
            let original_size = (img.height(), img.width());
            let mask = match mask_path {
                Some(mp) => {
                    let m = load_mask(mp)?;
                    if (m.height(), m.width()) != original_size {
                        return Err(IntraError::Dataset(format!(
                            "mask {} is {}x{}, image is {}x{}",
                            mp.display(),
                            m.height(),
                            m.width(),
                            original_size.0,
                            original_size.1
                        )));
                    }
                    Some(m)
                }
                None => None,
            };
            Ok(TestSample {
                name: stem(path),
                defect: defect.clone(),
                anomalous: mask.is_some(),
                image: img.resize_bilinear(size, size),
                mask,
                original_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        category: category.to_string(),
        image_size: size,
        train,
        train_names: train_files.iter().map(|p| stem(p)).collect(),
        test,
    })
}

fn to_rgb8(image: &Image) -> Result<image::RgbImage> {
    let img = image.broadcast_channels(CHANNELS)?;
    let raw = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).ok_or_else(|| IntraError::invalid("image buffer size"))
}

fn save(img: impl Into<image::DynamicImage>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IntraError::io(parent, e))?;
    }
    img.into().save(path).map_err(|source| IntraError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    save(to_rgb8(image)?, path)
}

/// Writes a binary mask as an 8-bit gray PNG.
pub fn save_mask(mask: &Plane, path: &Path) -> Result<()> {
    let raw = mask.data().iter().map(|&v| if v >= MASK_THRESHOLD { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).ok_or_else(|| IntraError::invalid("mask buffer size"))?;
    save(img, path)
}

/// Blue-to-red color ramp of `map / scale`.
pub fn heat_map(map: &Plane, scale: f32) -> Image {
    let s = if scale > 0.0 { scale } else { 1.0 };
    Image::from_fn(map.height(), map.width(), CHANNELS, |y, x, c| {
        let t = (map.get(y, x) / s).clamp(0.0, 1.0);
        let ramp = |center: f32| (1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0);
        match c {
            0 => ramp(3.0),
            1 => ramp(2.0),
            _ => ramp(1.0),
        }
    })
}

/// Original, reconstruction and heat map side by side.
pub fn triptych(original: &Image, reconstruction: &Image, map: &Plane, scale: f32) -> Result<Image> {
    let (h, w) = (original.height(), original.width());
    let panels = [
        original.broadcast_channels(CHANNELS)?,
        reconstruction.broadcast_channels(CHANNELS)?,
        heat_map(&map.resize_bilinear(h, w), scale),
    ];
    if panels.iter().any(|p| p.height() != h || p.width() != w) {
        return Err(IntraError::invalid("triptych panels differ in size"));
    }
    Ok(Image::from_fn(h, 3 * w, CHANNELS, |y, x, c| panels[x / w].get(y, x % w, c)))
}

/// Writes `dataset` under `<root>/<category>` in the MVTec AD layout.
/// Test images keep their original size only through their masks, so the
/// written images are at the working resolution.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let base = root.join(&dataset.category);
    fs::create_dir_all(base.join("train").join(GOOD)).map_err(|e| IntraError::io(&base, e))?;
    fs::create_dir_all(base.join("test").join(GOOD)).map_err(|e| IntraError::io(&base, e))?;
    for (img, name) in dataset.train.iter().zip(&dataset.train_names) {
        save_png(img, &base.join("train").join(GOOD).join(format!("{name}.png")))?;
    }
    for s in &dataset.test {
        save_png(&s.image, &base.join("test").join(&s.defect).join(format!("{}.png", s.name)))?;
        if let Some(mask) = &s.mask {
            save_mask(mask, &base.join("ground_truth").join(&s.defect).join(format!("{}_mask.png", s.name)))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub test_normal: usize,
    pub test_defect: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train: 20,
            test_normal: 10,
            test_defect: 10,
            size: 64,
        }
    }
}

pub const SYNTH_CATEGORY: &str = "synthetic";
pub const MIN_DEFECT_AREA: f64 = 0.01;
pub const MAX_DEFECT_AREA: f64 = 0.05;
pub const INTENSITY_SHIFT: f64 = 0.3;
/// Quarter period.
pub const PHASE_SHIFT: f64 = PI / 2.0;
pub const MIN_DEFECT_DELTA: f64 = 0.1;
const NOISE_AMPLITUDE: f64 = 0.03;
const NOISE_CELL: usize = 8;

#[derive(Debug, Clone)]
struct Wave {
    kx: f64,
    ky: f64,
    amplitude: [f64; CHANNELS],
}

/// Category-wide texture family.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<Wave>,
    phases: Vec<f64>,
    base: [f64; CHANNELS],
}

impl Texture {
    fn draw(rng: &mut ChaCha8Rng, size: usize) -> Texture {
        let count = rng.gen_range(2..=3);
        let per_wave = 0.32 / count as f64;
        let waves = (0..count)
            .map(|_| {
                let angle = rng.gen_range(0.0..PI);
                let period = rng.gen_range(6.0..14.0) * size as f64 / 64.0;
                let k = 2.0 * PI / period;
                let mut amplitude = [0.0; CHANNELS];
                for a in &mut amplitude {
                    *a = per_wave * rng.gen_range(0.6..1.0);
                }
                Wave {
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    amplitude,
                }
            })
            .collect();
        let mut base = [0.0; CHANNELS];
        for b in &mut base {
            *b = rng.gen_range(0.45..0.55);
        }
        let phases = (0..count).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Texture { waves, phases, base }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefectKind {
    Phase,
    Intensity,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Phase => "phase",
            DefectKind::Intensity => "intensity",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Region {
    ellipse: bool,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Region {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        if self.ellipse {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }

    fn draw(rng: &mut ChaCha8Rng, size: usize) -> Region {
        let ellipse = rng.gen_bool(0.5);
        let area = rng.gen_range(MIN_DEFECT_AREA..MAX_DEFECT_AREA) * (size * size) as f64;
        let aspect: f64 = rng.gen_range(0.5..2.0);
        // area = pi ry rx for ellipses, 4 ry rx for rectangles
        let ry_rx = if ellipse { area / PI } else { area / 4.0 };
        let ry = (ry_rx * aspect).sqrt();
        let rx = ry_rx / ry;
        let n = size as f64;
        Region {
            ellipse,
            cy: rng.gen_range(ry.min(n / 2.0)..=(n - ry).max(n / 2.0)),
            cx: rng.gen_range(rx.min(n / 2.0)..=(n - rx).max(n / 2.0)),
            ry,
            rx,
        }
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// Bilinearly interpolated lattice noise.
fn value_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let cells = size / NOISE_CELL + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / NOISE_CELL as f64;
            let fx = x as f64 / NOISE_CELL as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |a: usize, b: usize| lattice[a * cells + b];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(NOISE_AMPLITUDE * (top * (1.0 - ty) + bottom * ty));
        }
    }
    out
}

/// One synthetic sample with its defect-free render.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub clean: Image,
    pub image: Image,
    pub mask: Option<Plane>,
    pub defect: Option<DefectKind>,
}

fn render(texture: &Texture, phases: &[f64], noise: &[f64], size: usize, shift_phase: &dyn Fn(usize, usize) -> f64, shift: &dyn Fn(usize, usize) -> f64) -> Image {
    Image::from_fn(size, size, CHANNELS, |y, x, c| {
        let extra = shift_phase(y, x);
        let mut v = texture.base[c] + noise[y * size + x] + shift(y, x);
        for (w, &p) in texture.waves.iter().zip(phases) {
            v += w.amplitude[c] * (w.kx * x as f64 + w.ky * y as f64 + p + extra).sin();
        }
        quantize(v)
    })
}

fn synth_sample(texture: &Texture, rng: &mut ChaCha8Rng, size: usize, defect: bool) -> SyntheticSample {
    let phases = &texture.phases;
    let noise = value_noise(rng, size);
    let clean = render(texture, phases, &noise, size, &|_, _| 0.0, &|_, _| 0.0);
    if !defect {
        return SyntheticSample {
            image: clean.clone(),
            clean,
            mask: None,
            defect: None,
        };
    }
    loop {
        let region = Region::draw(rng, size);
        let kind = if rng.gen_bool(0.5) { DefectKind::Phase } else { DefectKind::Intensity };
        let delta = if rng.gen_bool(0.5) { INTENSITY_SHIFT } else { -INTENSITY_SHIFT };
        let image = match kind {
            DefectKind::Phase => render(texture, phases, &noise, size, &|y, x| if region.contains(y, x) { PHASE_SHIFT } else { 0.0 }, &|_, _| 0.0),
            DefectKind::Intensity => render(texture, phases, &noise, size, &|_, _| 0.0, &|y, x| if region.contains(y, x) { delta } else { 0.0 }),
        };
        let mask = Plane::from_fn(size, size, |y, x| {
            let changed = (0..CHANNELS).any(|c| image.get(y, x, c) != clean.get(y, x, c));
            if region.contains(y, x) && changed {
                1.0
            } else {
                0.0
            }
        });
        let (mut total, mut count) = (0.0, 0usize);
        for y in 0..size {
            for x in 0..size {
                if mask.get(y, x) > 0.0 {
                    count += 1;
                    total += (0..CHANNELS).map(|c| (image.get(y, x, c) - clean.get(y, x, c)).abs() as f64).sum::<f64>() / CHANNELS as f64;
                }
            }
        }
        if count > 0 && total / count as f64 >= MIN_DEFECT_DELTA {
            return SyntheticSample {
                clean,
                image,
                mask: Some(mask),
                defect: Some(kind),
            };
        }
    }
}

/// Every sample of the synthetic dataset, in order: train, normal test,
/// defective test.
pub fn synthetic_samples(config: &SynthConfig) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let texture = Texture::draw(&mut rng, config.size);
    let normal = config.train + config.test_normal;
    (0..normal + config.test_defect)
        .map(|i| synth_sample(&texture, &mut rng, config.size, i >= normal))
        .collect()
}

/// Seeded texture dataset with elliptical or rectangular defects.
pub fn generate_synthetic(config: &SynthConfig) -> Dataset {
    let samples = synthetic_samples(config);
    let (train, test) = samples.split_at(config.train);
    let size = config.size;
    Dataset {
        category: SYNTH_CATEGORY.to_string(),
        image_size: size,
        train: train.iter().map(|s| s.image.clone()).collect(),
        train_names: (0..config.train).map(|i| format!("{i:03}")).collect(),
        test: test
            .iter()
            .enumerate()
            .map(|(i, s)| TestSample {
                name: format!("{i:03}"),
                defect: s.defect.map_or(GOOD, DefectKind::name).to_string(),
                anomalous: s.mask.is_some(),
                image: s.image.clone(),
                mask: s.mask.clone(),
                original_size: (size, size),
            })
            .collect(),
    }
}
