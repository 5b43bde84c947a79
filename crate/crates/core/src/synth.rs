//! Synthetic frame pairs with exact ground-truth flow.
//!
//! Each sample shows one textured shape over a textured background. The shape moves by an
//! integer displacement, so the ground truth is exact and frame 2 is frame 1 shifted
//! pixel for pixel on the shape. The label is the motion direction quantized into eight
//! 45° sectors centred on the axes (0 = +x, 2 = +y, image rows growing downward).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::flow_io::{read_flo_file, read_ppm_file, write_flo_file, write_ppm_file, RgbImage};
use crate::real::Real;
use crate::tensor::Tensor;

/// Number of motion-direction classes.
pub const NUM_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
    Ring,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Rectangle,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Background {
    Static,
    /// The whole background shifts by `(dx, dy)` between frames.
    Translate { dx: i32, dy: i32 },
}

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub shapes: Vec<ShapeKind>,
    /// Displacements are drawn from `[-max_disp, max_disp]²` without the origin.
    pub max_disp: i32,
    /// Shape bounding-box side range, inclusive.
    pub shape_min: usize,
    pub shape_max: usize,
    pub texture_seed: u64,
    /// Shapes that never appear in the training split.
    #[serde(default)]
    pub held_out: Vec<ShapeKind>,
}

impl SceneSpec {
    /// Square canvas of side `size` with every shape, a static background, and `D = 5`.
    pub fn with_size(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            background: Background::Static,
            shapes: ShapeKind::ALL.to_vec(),
            max_disp: 5,
            shape_min: size / 4,
            shape_max: 3 * size / 8,
            texture_seed: 0,
            held_out: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::config(format!("canvas {}x{} is below 32x32", self.width, self.height)));
        }
        if self.max_disp < 1 {
            return Err(Error::config(format!("max displacement {} must be >= 1", self.max_disp)));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("scene needs at least one shape kind"));
        }
        if self.shape_min < 3 || self.shape_min > self.shape_max {
            return Err(Error::config(format!(
                "shape size range {}..={} is invalid",
                self.shape_min, self.shape_max
            )));
        }
        let bg = match self.background {
            Background::Static => 0,
            Background::Translate { dx, dy } => dx.unsigned_abs().max(dy.unsigned_abs()) as usize,
        };
        let need = self.shape_max + self.max_disp as usize + bg;
        if need > self.height.min(self.width) {
            return Err(Error::config(format!(
                "canvas {}x{} too small for shapes up to {} px moving up to {} px",
                self.width, self.height, self.shape_max, self.max_disp
            )));
        }
        if self.held_out.iter().any(|h| !self.shapes.contains(h)) {
            return Err(Error::config("held-out shapes must be part of the shape set"));
        }
        if self.shapes.iter().all(|s| self.held_out.contains(s)) {
            return Err(Error::config("every shape is held out; nothing left to train on"));
        }
        Ok(())
    }

    fn train_shapes(&self) -> Vec<ShapeKind> {
        self.shapes.iter().copied().filter(|s| !self.held_out.contains(s)).collect()
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::with_size(64)
    }
}

/// One generated frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame1: RgbImage,
    pub frame2: RgbImage,
    pub flow: FlowField,
    pub label: usize,
    pub shape: ShapeKind,
    pub displacement: (i32, i32),
    /// Shape mask in frame 1, row-major.
    pub mask: Vec<bool>,
}

/// Sector of `(dx, dy)`: `round(atan2(dy, dx) / 45°) mod 8`.
pub fn direction_class(dx: f64, dy: f64) -> usize {
    let sector = (dy.atan2(dx) / std::f64::consts::FRAC_PI_4).round() as i64;
    sector.rem_euclid(NUM_CLASSES as i64) as usize
}

/// Every integer displacement in `[-d, d]²` except the origin whose direction is `label`.
pub fn displacements_for(label: usize, d: i32) -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    for dy in -d..=d {
        for dx in -d..=d {
            if (dx, dy) != (0, 0) && direction_class(dx as f64, dy as f64) == label {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// `side × side` texture in `[lo, lo + span]` per channel: uniform noise box-blurred twice.
fn texture(rng: &mut ChaCha8Rng, w: usize, h: usize, base: [f32; 3], span: f32) -> Vec<[u8; 3]> {
    let mut planes: Vec<Vec<f32>> = (0..3).map(|_| (0..w * h).map(|_| rng.random::<f32>()).collect()).collect();
    for p in planes.iter_mut() {
        for _ in 0..2 {
            *p = box_blur(p, w, h);
        }
        // re-stretch to the full range so blurring does not flatten the contrast
        let (lo, hi) = p.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
        p.iter_mut().for_each(|x| *x = (*x - lo) * scale);
    }
    (0..w * h)
        .map(|i| std::array::from_fn(|c| (base[c] + span * planes[c][i]).round().clamp(0.0, 255.0) as u8))
        .collect()
}

fn box_blur(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += src[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// Mask of a shape in its `w × h` bounding box.
fn shape_mask(kind: ShapeKind, w: usize, h: usize, variant: u32) -> Vec<bool> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let r = w.min(h) as f64 / 2.0;
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x as f64, y as f64)))
        .map(|(x, y)| match kind {
            ShapeKind::Rectangle | ShapeKind::Bar => true,
            ShapeKind::Disk => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            ShapeKind::Ring => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r * r && d2 >= (0.45 * r).powi(2)
            }
            ShapeKind::Triangle => {
                // apex on one of the four sides
                let (fx, fy) = (x / (w as f64 - 1.0), y / (h as f64 - 1.0));
                let (along, across) = match variant % 4 {
                    0 => (fx, fy),
                    1 => (fx, 1.0 - fy),
                    2 => (fy, fx),
                    _ => (fy, 1.0 - fx),
                };
                (along - 0.5).abs() <= across / 2.0
            }
        })
        .collect()
}

/// Draws a sample; `label` and `pool` pin the direction class and the shape candidates.
fn gen_sample_with(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    tex_rng: &mut ChaCha8Rng,
    label: usize,
    pool: &[ShapeKind],
) -> Result<Sample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let kind = *pool.choose(rng).ok_or_else(|| Error::config("empty shape pool"))?;
    let (dx, dy) = *displacements_for(label, spec.max_disp)
        .choose(rng)
        .expect("every sector holds integer displacements for D >= 1");
    let (mut sw, mut sh) = (
        rng.random_range(spec.shape_min..=spec.shape_max),
        rng.random_range(spec.shape_min..=spec.shape_max),
    );
    let variant: u32 = rng.random();
    match kind {
        ShapeKind::Disk | ShapeKind::Ring => sh = sw,
        ShapeKind::Bar => {
            let thick = (spec.shape_min / 2).max(3);
            if variant.is_multiple_of(2) {
                (sw, sh) = (spec.shape_max, thick);
            } else {
                (sw, sh) = (thick, spec.shape_max);
            }
        }
        _ => {}
    }
    let (bx, by) = match spec.background {
        Background::Static => (0, 0),
        Background::Translate { dx, dy } => (dx, dy),
    };
    // shape must lie inside the canvas in both frames
    let place = |extent: usize, size: usize, d: i32| -> (i64, i64) {
        let lo = (-d).max(0) as i64;
        let hi = extent as i64 - size as i64 - d.max(0) as i64;
        (lo, hi)
    };
    let (x_lo, x_hi) = place(w, sw, dx);
    let (y_lo, y_hi) = place(h, sh, dy);
    if x_hi < x_lo || y_hi < y_lo {
        return Err(Error::config("canvas too small for shape and displacement"));
    }
    let (px, py) = (rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi));

    let margin = bx.unsigned_abs().max(by.unsigned_abs()) as usize;
    let (bw, bh) = (w + 2 * margin, h + 2 * margin);
    let bg_base = std::array::from_fn(|_| tex_rng.random_range(20.0..70.0));
    let bg = texture(tex_rng, bw, bh, bg_base, 110.0);
    let fg_base: [f32; 3] = std::array::from_fn(|_| tex_rng.random_range(60.0..150.0));
    let fg = texture(tex_rng, sw, sh, fg_base, 105.0);
    let mask = shape_mask(kind, sw, sh, variant);

    let m = margin as i64;
    let mut f1 = vec![[0u8; 3]; w * h];
    let mut f2 = vec![[0u8; 3]; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = (y * w as i64 + x) as usize;
            f1[i] = bg[((y + m) * bw as i64 + x + m) as usize];
            f2[i] = bg[((y - by as i64 + m) * bw as i64 + x - bx as i64 + m) as usize];
        }
    }
    let mut flow = FlowField::constant(w, h, bx as f32, by as f32)?;
    let mut frame_mask = vec![false; w * h];
    for sy in 0..sh {
        for sx in 0..sw {
            if !mask[sy * sw + sx] {
                continue;
            }
            let (x1, y1) = (px as usize + sx, py as usize + sy);
            let (x2, y2) = ((x1 as i64 + dx as i64) as usize, (y1 as i64 + dy as i64) as usize);
            f1[y1 * w + x1] = fg[sy * sw + sx];
            f2[y2 * w + x2] = fg[sy * sw + sx];
            flow.set(x1, y1, (dx as f32, dy as f32));
            frame_mask[y1 * w + x1] = true;
        }
    }
    let flat = |f: Vec<[u8; 3]>| RgbImage::new(w, h, f.into_iter().flatten().collect());
    Ok(Sample {
        frame1: flat(f1)?,
        frame2: flat(f2)?,
        flow,
        label,
        shape: kind,
        displacement: (dx, dy),
        mask: frame_mask,
    })
}

/// A sample with a uniformly drawn direction class and shape.
pub fn gen_sample(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let label = rng.random_range(0..NUM_CLASSES);
    let mut tex = ChaCha8Rng::seed_from_u64(spec.texture_seed ^ rng.random::<u64>());
    gen_sample_with(spec, rng, &mut tex, label, &spec.shapes)
}

/// Train or test membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub frame1: String,
    pub frame2: String,
    pub flo: String,
    pub label: usize,
    pub split: Split,
    pub shape: ShapeKind,
}

/// Index of a dataset on disk; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: file.clone(),
            message: e.to_string(),
        })?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Train/test sizes for an 8:2 split of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let train = n * 8 / 10;
    (train, n - train)
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Generates the samples of a dataset in memory. Labels cycle through the classes so each
/// split is balanced to within one sample per class.
pub fn gen_samples(spec: &SceneSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Vec<(Sample, Split)>> {
    spec.validate()?;
    let train_pool = spec.train_shapes();
    let mut out = Vec::with_capacity(n_train + n_test);
    for id in 0..n_train + n_test {
        let split = if id < n_train { Split::Train } else { Split::Test };
        let local = if id < n_train { id } else { id - n_train };
        let label = local % NUM_CLASSES;
        let pool = if split == Split::Train { &train_pool } else { &spec.shapes };
        let mut rng = sample_rng(seed, 2 * id as u64);
        let mut tex = sample_rng(spec.texture_seed ^ seed.rotate_left(17), 2 * id as u64 + 1);
        out.push((gen_sample_with(spec, &mut rng, &mut tex, label, pool)?, split));
    }
    Ok(out)
}

/// Writes frames (PPM), flows (`.flo`) and `manifest.json` under `dir`.
pub fn gen_dataset(spec: &SceneSpec, n_train: usize, n_test: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    let samples = gen_samples(spec, n_train, n_test, seed)?;
    for sub in ["frames", "flow"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (id, (s, split)) in samples.into_iter().enumerate() {
        let e = ManifestEntry {
            id,
            frame1: format!("frames/{id:05}_1.ppm"),
            frame2: format!("frames/{id:05}_2.ppm"),
            flo: format!("flow/{id:05}.flo"),
            label: s.label,
            split,
            shape: s.shape,
        };
        write_ppm_file(&dir.join(&e.frame1), &s.frame1)?;
        write_ppm_file(&dir.join(&e.frame2), &s.frame2)?;
        write_flo_file(&dir.join(&e.flo), &s.flow)?;
        entries.push(e);
    }
    let manifest = Manifest { spec: spec.clone(), seed, samples: entries, root: dir.to_path_buf() };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Pixel normalization applied when frames become network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `0 → −1`, `255 → +1`.
    #[default]
    Symmetric,
    /// `0 → 0`, `255 → 1`.
    Unit,
}

impl Normalization {
    pub fn apply(self, px: u8) -> f64 {
        match self {
            Normalization::Symmetric => px as f64 / 127.5 - 1.0,
            Normalization::Unit => px as f64 / 255.0,
        }
    }
}

/// Appends a frame pair as 6 planar channels (frame 1 RGB, then frame 2 RGB).
pub fn push_pair<T: Real>(a: &RgbImage, b: &RgbImage, norm: Normalization, out: &mut Vec<T>) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    for img in [a, b] {
        for c in 0..3 {
            out.extend(img.data.iter().skip(c).step_by(3).map(|&p| T::of(norm.apply(p))));
        }
    }
    Ok(())
}

/// `[1, 6, H, W]` network input from two frames.
pub fn pair_tensor<T: Real>(a: &RgbImage, b: &RgbImage, norm: Normalization) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(6 * a.width * a.height);
    push_pair(a, b, norm, &mut data)?;
    Tensor::new(&[1, 6, a.height, a.width], data)
}

/// A batch read from disk: inputs `[N, 6, H, W]`, flows `[N, 2, H, W]`, and labels.
pub fn load_batch<T: Real>(
    manifest: &Manifest,
    indices: &[usize],
    norm: Normalization,
) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
    let (h, w) = (manifest.spec.height, manifest.spec.width);
    let mut inputs = Vec::with_capacity(indices.len() * 6 * h * w);
    let mut flows = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let e = manifest
            .samples
            .get(i)
            .ok_or_else(|| Error::Data(format!("sample index {i} out of range ({})", manifest.samples.len())))?;
        let (p1, p2) = (manifest.path(&e.frame1), manifest.path(&e.frame2));
        let (a, b) = (read_ppm_file(&p1)?, read_ppm_file(&p2)?);
        for (img, p) in [(&a, &p1), (&b, &p2)] {
            if (img.width, img.height) != (w, h) {
                return Err(Error::Load {
                    path: p.clone(),
                    message: format!("frame is {}x{}, manifest says {w}x{h}", img.width, img.height),
                });
            }
        }
        push_pair(&a, &b, norm, &mut inputs)?;
        let fp = manifest.path(&e.flo);
        let f = read_flo_file(&fp)?;
        if (f.width(), f.height()) != (w, h) {
            return Err(Error::Load { path: fp, message: "flow extent differs from the manifest".into() });
        }
        flows.push(f);
        labels.push(e.label);
    }
    let x = Tensor::new(&[indices.len(), 6, h, w], inputs)?;
    Ok((x, FlowField::stack(&flows)?, labels))
}
