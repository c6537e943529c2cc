//! Slices, labels and where they come from: a synthetic cardiac-like shape
//! generator, slice-folder ingestion, one-hot encoding and augmentation.
//!
//! Slice-folder layout:
//!
//! ```text
//! <root>/images/<volume>_<slice>.png   8/16-bit grayscale (or RGB for 3 channels)
//! <root>/labels/<volume>_<slice>.png   8-bit class indices
//! <root>/manifest.json                 optional {"volumes": [{"id", "slices", "spacing"}]}
//! ```
//!
//! The volume id is everything before the last underscore of the stem.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::AugmentToggles;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A seeded generator keyed by `seed` and a sequence of integer tags.
pub fn derived_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ 0x5eed_0f_f10u64);
    for &t in tags {
        h = splitmix(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used to turn volume ids into rng tags.
pub fn id_tag(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Integer class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("label map {h}x{w} with {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut hist = vec![0; classes.max(self.max_label() as usize + 1)];
        for &v in &self.data {
            hist[v as usize] += 1;
        }
        hist
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    /// `(1, C_I, H, W)`, normalized.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub volume_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn validate(&self, seg_channels: usize) -> Result<()> {
        let (_, _, h, w) = self.image.dims4()?;
        if (h, w) != (self.label.h, self.label.w) {
            return Err(Error::Shape(format!(
                "{}_{}: image {h}x{w}, label {}x{}",
                self.volume_id, self.slice_index, self.label.h, self.label.w
            )));
        }
        if self.label.max_label() as usize >= seg_channels {
            return Err(Error::InvalidArgument(format!(
                "{}_{}: label {} >= {seg_channels} classes",
                self.volume_id,
                self.slice_index,
                self.label.max_label()
            )));
        }
        if !self.image.all_finite() {
            return Err(Error::NonFinite(format!("{}_{} image", self.volume_id, self.slice_index)));
        }
        Ok(())
    }
}

/// `(1, C, H, W)` mask with channel `c` set where the label equals `c`.
pub fn one_hot<T: Real>(label: &LabelMap, classes: usize) -> Result<Tensor<T>> {
    let n = label.h * label.w;
    if let Some(bad) = label.data.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label value {bad} out of range for {classes} classes")));
    }
    let mut out = Tensor::zeros(&[1, classes, label.h, label.w]);
    let d = out.data_mut();
    for (i, &v) in label.data.iter().enumerate() {
        d[v as usize * n + i] = T::one();
    }
    Ok(out)
}

/// Per-pixel argmax over channels of a `(1, C, H, W)` map; ties go to the lower class.
pub fn argmax<T: Real>(x: &Tensor<T>) -> Result<LabelMap> {
    let (_, c, h, w) = x.dims4()?;
    let n = h * w;
    let d = x.data();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Batches samples into `(B, C_I, H, W)` images and `(B, C_seg, H, W)` one-hot masks.
pub fn collate<T: Real>(samples: &[&SliceSample], classes: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let masks = samples.iter().map(|s| one_hot(&s.label, classes)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}

/// Min-max rescale to `[-1, 1]`; constant inputs map to `-1`.
pub fn normalize_min_max(v: &mut [f32]) {
    let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;
    for x in v.iter_mut() {
        *x = if range > 0.0 { 2.0 * (*x - lo) / range - 1.0 } else { -1.0 };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: String,
    pub slices: usize,
    /// Millimetres per voxel along (slice, row, column).
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub volumes: Vec<VolumeInfo>,
}

/// Samples sorted by `(volume_id, slice_index)` plus volume membership.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<SliceSample>,
    pub volumes: Vec<VolumeInfo>,
}

impl Dataset {
    /// Builds volume info from the samples when no manifest is available.
    pub fn from_samples(mut samples: Vec<SliceSample>) -> Self {
        samples.sort_by(|a, b| (&a.volume_id, a.slice_index).cmp(&(&b.volume_id, b.slice_index)));
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in &samples {
            let c = counts.entry(s.volume_id.clone()).or_default();
            *c = (*c).max(s.slice_index + 1);
        }
        let volumes = counts.into_iter().map(|(id, slices)| VolumeInfo { id, slices, spacing: [1.0; 3] }).collect();
        Self { samples, volumes }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits by whole volumes: the first `n` volumes and the rest.
    pub fn split_volumes(self, n: usize) -> (Dataset, Dataset) {
        let keep: Vec<String> = self.volumes.iter().take(n).map(|v| v.id.clone()).collect();
        let (a, b): (Vec<_>, Vec<_>) = self.samples.into_iter().partition(|s| keep.contains(&s.volume_id));
        let (va, vb): (Vec<_>, Vec<_>) = self.volumes.into_iter().partition(|v| keep.contains(&v.id));
        (Dataset { samples: a, volumes: va }, Dataset { samples: b, volumes: vb })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { volumes: self.volumes.clone() }
    }
}

/// Parameters of the nested-ellipse generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Including background.
    pub classes: usize,
    /// Gaussian noise standard deviation in `[0, 1]` intensity units, before normalization.
    pub noise: f64,
    pub seed: u64,
    pub volumes: usize,
    pub slices_per_volume: usize,
    /// Volume ids are `<prefix><index:03>`.
    pub prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { size: 64, classes: 4, noise: 0.05, seed: 0, volumes: 60, slices_per_volume: 10, prefix: "syn".into() }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::InvalidArgument(format!("synthetic class count {} outside 2..=255", self.classes)));
        }
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("synthetic canvas {} too small (min 16)", self.size)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise level {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// Class intensities in `[0, 1]`: background dark, the rest in well separated bands.
const CLASS_INTENSITY: [f64; 8] = [0.1, 0.65, 0.35, 0.9, 0.5, 0.8, 0.2, 0.95];

/// Integer ellipse test `dx²/a² + dy²/b² <= 1`.
fn in_ellipse(dx: i64, dy: i64, a: i64, b: i64) -> bool {
    dx * dx * b * b + dy * dy * a * a <= a * a * b * b
}

struct VolumeGeometry {
    cx: i64,
    cy: i64,
    a: i64,
    b: i64,
    ring: i64,
    side_a: i64,
    side_b: i64,
    intensity: Vec<f64>,
}

impl VolumeGeometry {
    fn draw<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Self {
        let s = spec.size as i64;
        let u = |rng: &mut R, lo: i64, hi: i64| lo * s / 64 + rng.random_range(0..=(hi - lo) * s / 64);
        let intensity = (0..spec.classes)
            .map(|c| CLASS_INTENSITY[c % CLASS_INTENSITY.len()] + rng.random_range(-0.03..0.03))
            .collect();
        Self {
            cx: s / 2 + u(rng, -4, 4),
            cy: s / 2 + u(rng, -4, 4),
            a: u(rng, 5, 9).max(2),
            b: u(rng, 5, 9).max(2),
            ring: u(rng, 3, 5).max(1),
            side_a: u(rng, 4, 7).max(2),
            side_b: u(rng, 4, 8).max(2),
            intensity,
        }
    }

    /// Label at `(y, x)` for a slice whose radii are shrunk by `f`.
    fn label(&self, classes: usize, f: f64, y: i64, x: i64) -> u8 {
        let sc = |r: i64| ((r as f64 * f).round() as i64).max(1);
        let (a, b, m) = (sc(self.a), sc(self.b), sc(self.ring));
        let inner = classes.saturating_sub(2) as i64;
        // concentric classes 2.., innermost has the highest index
        for c in (2..classes).rev() {
            let k = inner - (c as i64 - 1);
            if in_ellipse(x - self.cx, y - self.cy, a + m * k, b + m * k) {
                return c as u8;
            }
        }
        if classes == 2 {
            return u8::from(in_ellipse(x - self.cx, y - self.cy, a, b));
        }
        let outer = a + m * (inner - 1);
        let (sa, sb) = (outer / 2 + sc(self.side_a), b + m * (inner - 1) + sc(self.side_b) / 2);
        let sx = self.cx - outer - sc(self.side_a) / 2;
        u8::from(in_ellipse(x - sx, y - self.cy, sa, sb))
    }
}

/// Deterministic stream of nested-ellipse slices, volume by volume.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SliceSample>> {
    spec.validate()?;
    let n = spec.size;
    let mut out = Vec::with_capacity(spec.volumes * spec.slices_per_volume);
    for v in 0..spec.volumes {
        let volume_id = format!("{}{v:03}", spec.prefix);
        let tag = id_tag(&volume_id);
        let geo = VolumeGeometry::draw(spec, &mut derived_rng(spec.seed, &[tag]));
        for z in 0..spec.slices_per_volume {
            let frac = if spec.slices_per_volume > 1 { z as f64 / (spec.slices_per_volume - 1) as f64 } else { 0.0 };
            let f = 1.0 - 0.45 * frac;
            let mut rng = derived_rng(spec.seed, &[tag, z as u64]);
            let mut labels = Vec::with_capacity(n * n);
            let mut pixels = Vec::with_capacity(n * n);
            for y in 0..n as i64 {
                for x in 0..n as i64 {
                    let c = geo.label(spec.classes, f, y, x);
                    labels.push(c);
                    let noise: f64 = if spec.noise > 0.0 { spec.noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                    pixels.push((geo.intensity[c as usize] + noise) as f32);
                }
            }
            normalize_min_max(&mut pixels);
            out.push(SliceSample {
                image: Tensor::from_vec(&[1, 1, n, n], pixels)?,
                label: LabelMap::new(n, n, labels)?,
                volume_id: volume_id.clone(),
                slice_index: z,
            });
        }
    }
    Ok(out)
}

/// Synthetic samples with their volume table.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(Dataset::from_samples(generate_synthetic(spec)?))
}

/// Horizontal mirror of image and label.
pub fn hflip(s: &SliceSample) -> SliceSample {
    remap_exact(s, |y, x, _h, w| (y, w - 1 - x), false)
}

/// Vertical mirror of image and label.
pub fn vflip(s: &SliceSample) -> SliceSample {
    remap_exact(s, |y, x, h, _w| (h - 1 - y, x), false)
}

/// Counter-clockwise quarter turn; square slices only keep their size.
pub fn rot90(s: &SliceSample) -> SliceSample {
    // output (y, x) of the (w × h) result reads input (x, w - 1 - y)
    remap_exact(s, |y, x, _h, w| (x, w - 1 - y), true)
}

fn remap_exact(s: &SliceSample, src: impl Fn(usize, usize, usize, usize) -> (usize, usize), transpose: bool) -> SliceSample {
    let (h, w) = (s.label.h, s.label.w);
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    let channels = s.image.shape()[1];
    let mut img = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x, h, w);
                img.push(s.image.data()[(c * h + sy) * w + sx]);
            }
        }
    }
    let mut lab = Vec::with_capacity(h * w);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = src(y, x, h, w);
            lab.push(s.label.get(sy, sx));
        }
    }
    SliceSample {
        image: Tensor::from_vec(&[1, channels, oh, ow], img).expect("remap shape"),
        label: LabelMap { h: oh, w: ow, data: lab },
        volume_id: s.volume_id.clone(),
        slice_index: s.slice_index,
    }
}

/// Random training augmentation. Geometry (flips, rotation within ±15°,
/// scaling in [0.9, 1.1]) is shared by image and label, labels sampled by
/// nearest neighbour with background outside the canvas; intensity scale
/// and shift, gamma in [0.8, 1.2] and noise (σ ≤ 0.05) touch the image only.
pub fn augment<R: Rng + ?Sized>(s: &SliceSample, t: &AugmentToggles, rng: &mut R) -> SliceSample {
    let mut out = s.clone();
    let flip_x = t.hflip && rng.random_bool(0.5);
    let flip_y = t.vflip && rng.random_bool(0.5);
    let angle = if t.rotate { rng.random_range(-15.0f64..=15.0).to_radians() } else { 0.0 };
    let scale = if t.scale { rng.random_range(0.9f64..=1.1) } else { 1.0 };
    if flip_x || flip_y || angle != 0.0 || scale != 1.0 {
        out = warp(&out, flip_x, flip_y, angle, scale);
    }
    let gamma = if t.gamma { Some(rng.random_range(0.8f64..=1.2)) } else { None };
    let affine = if t.intensity { Some((rng.random_range(0.9f64..=1.1), rng.random_range(-0.1f64..=0.1))) } else { None };
    let sigma = if t.noise { Some(rng.random_range(0.0f64..=0.05)) } else { None };
    if gamma.is_some() || affine.is_some() || sigma.is_some() {
        for v in out.image.data_mut() {
            let mut x = *v as f64;
            if let Some(g) = gamma {
                let u = ((x + 1.0) / 2.0).clamp(0.0, 1.0);
                x = 2.0 * u.powf(g) - 1.0;
            }
            if let Some((a, b)) = affine {
                x = a * x + b;
            }
            if let Some(sd) = sigma {
                x += sd * rng.sample::<f64, _>(StandardNormal);
            }
            *v = x as f32;
        }
    }
    out
}

/// Inverse-mapped flip/rotate/scale about the canvas centre.
fn warp(s: &SliceSample, flip_x: bool, flip_y: bool, angle: f64, scale: f64) -> SliceSample {
    let (h, w) = (s.label.h, s.label.w);
    let channels = s.image.shape()[1];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let fill = s.image.data().iter().copied().fold(f32::INFINITY, f32::min);
    let src = |y: usize, x: usize| {
        let mut dy = y as f64 - cy;
        let mut dx = x as f64 - cx;
        if flip_x {
            dx = -dx;
        }
        if flip_y {
            dy = -dy;
        }
        // inverse rotation, then inverse scale
        let rx = (cos * dx + sin * dy) / scale;
        let ry = (-sin * dx + cos * dy) / scale;
        (ry + cy, rx + cx)
    };
    let mut label = Vec::with_capacity(h * w);
    let mut img = vec![0f32; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (ny, nx) = (sy.round(), sx.round());
            let inside = ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64;
            label.push(if inside { s.label.get(ny as usize, nx as usize) } else { 0 });
            for c in 0..channels {
                let plane = &s.image.data()[c * h * w..(c + 1) * h * w];
                img[(c * h + y) * w + x] = bilinear(plane, h, w, sy, sx, fill);
            }
        }
    }
    SliceSample {
        image: Tensor::from_vec(&[1, channels, h, w], img).expect("warp shape"),
        label: LabelMap { h, w, data: label },
        volume_id: s.volume_id.clone(),
        slice_index: s.slice_index,
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64, fill: f32) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Splits `<volume>_<slice>` at the last underscore.
pub fn parse_stem(stem: &str) -> Option<(String, usize)> {
    let (vol, idx) = stem.rsplit_once('_')?;
    if vol.is_empty() {
        return None;
    }
    Some((vol.to_string(), idx.parse().ok()?))
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Reads a slice folder, resizing to `size` (bilinear for images, nearest for
/// labels) and min-max normalizing each image.
pub fn ingest_slice_folder(
    root: &Path,
    image_channels: usize,
    seg_channels: usize,
    size: [usize; 2],
) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::data(root, "not a directory"));
    }
    let images = png_stems(&root.join("images"))?;
    let labels = png_stems(&root.join("labels"))?;
    for (stem, path) in &labels {
        if !images.contains_key(stem) {
            return Err(Error::data(path, "label has no matching image"));
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, ipath) in &images {
        let lpath = labels.get(stem).ok_or_else(|| Error::data(ipath, "image has no matching label"))?;
        let (volume_id, slice_index) =
            parse_stem(stem).ok_or_else(|| Error::data(ipath, "file name is not <volume>_<slice>"))?;
        let image = read_image(ipath, image_channels, size)?;
        let label = read_label(lpath, size)?;
        if let Some(bad) = label.data.iter().find(|&&v| v as usize >= seg_channels) {
            return Err(Error::data(lpath, format!("label value {bad} >= {seg_channels} classes")));
        }
        samples.push(SliceSample { image, label, volume_id, slice_index });
    }
    let mut ds = Dataset::from_samples(samples);
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: manifest_path.clone(), message: e.to_string() })?;
        for v in &ds.volumes {
            if !manifest.volumes.iter().any(|m| m.id == v.id) {
                return Err(Error::data(&manifest_path, format!("volume {} missing from manifest", v.id)));
            }
        }
        ds.volumes = manifest.volumes.into_iter().filter(|m| ds.volumes.iter().any(|v| v.id == m.id)).collect();
    }
    Ok(ds)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(path, format!("unreadable raster: {e}")))
}

fn read_image(path: &Path, channels: usize, [h, w]: [usize; 2]) -> Result<Tensor<f32>> {
    let img = open_image(path)?;
    let planes: Vec<Vec<f32>> = match channels {
        1 => {
            let g = imageops::resize(&img.to_luma32f(), w as u32, h as u32, FilterType::Triangle);
            vec![g.into_raw()]
        }
        3 => {
            let rgb = imageops::resize(&img.to_rgb32f(), w as u32, h as u32, FilterType::Triangle);
            let raw = rgb.into_raw();
            (0..3).map(|c| raw.iter().skip(c).step_by(3).copied().collect()).collect()
        }
        n => return Err(Error::data(path, format!("cannot read {n}-channel images from PNG (1 or 3 supported)"))),
    };
    let mut data: Vec<f32> = planes.into_iter().flatten().collect();
    normalize_min_max(&mut data);
    Tensor::from_vec(&[1, channels, h, w], data)
}

fn read_label(path: &Path, [h, w]: [usize; 2]) -> Result<LabelMap> {
    let img = open_image(path)?.to_luma8();
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
    };
    LabelMap::new(h, w, img.into_raw())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_png<P: image::PixelWithColorType>(buf: &ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    P::Subpixel: image::Primitive,
    [P::Subpixel]: image::EncodableLayout,
{
    buf.save(path).map_err(|e| Error::data(path, format!("cannot write PNG: {e}")))
}

/// Writes a dataset in slice-folder layout (16-bit images, first channel only).
pub fn write_slice_folder(root: &Path, ds: &Dataset) -> Result<()> {
    create_dir(&root.join("images"))?;
    create_dir(&root.join("labels"))?;
    for s in &ds.samples {
        let stem = format!("{}_{}", s.volume_id, s.slice_index);
        let (h, w) = (s.label.h as u32, s.label.w as u32);
        let px: Vec<u16> = s.image.data()[..(h * w) as usize]
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, px).expect("image buffer size");
        save_png(&img, &root.join("images").join(format!("{stem}.png")))?;
        let lab: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w, h, s.label.data.clone()).expect("label buffer size");
        save_png(&lab, &root.join("labels").join(format!("{stem}.png")))?;
    }
    write_manifest(root, &ds.manifest())
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path, message: e.to_string() })
}

/// One predicted slice: per-class values `(C, H, W)` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePrediction {
    pub volume_id: String,
    pub slice_index: usize,
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

/// Writes `values/<volume>_<slice>_c<k>.png` as 16-bit rasters of `clamp(v, 0, 1)`
/// plus the manifest.
pub fn write_predictions(root: &Path, preds: &[SlicePrediction], manifest: &Manifest) -> Result<()> {
    let dir = root.join("values");
    create_dir(&dir)?;
    for p in preds {
        let n = p.h * p.w;
        for c in 0..p.classes {
            let px: Vec<u16> =
                p.values[c * n..(c + 1) * n].iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            let img: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(p.w as u32, p.h as u32, px).expect("prediction buffer size");
            save_png(&img, &dir.join(format!("{}_{}_c{c}.png", p.volume_id, p.slice_index)))?;
        }
    }
    write_manifest(root, manifest)
}

/// Reads predictions written by [`write_predictions`].
pub fn read_predictions(root: &Path) -> Result<(Vec<SlicePrediction>, Manifest)> {
    let manifest = read_manifest(root)?;
    let dir = root.join("values");
    let files = png_stems(&dir)?;
    let mut grouped: BTreeMap<(String, usize), BTreeMap<usize, PathBuf>> = BTreeMap::new();
    for (stem, path) in files {
        let (rest, class) = stem
            .rsplit_once("_c")
            .and_then(|(r, c)| Some((r.to_string(), c.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::data(&path, "file name is not <volume>_<slice>_c<class>"))?;
        let key = parse_stem(&rest).ok_or_else(|| Error::data(&path, "file name is not <volume>_<slice>_c<class>"))?;
        grouped.entry(key).or_default().insert(class, path);
    }
    let mut preds = Vec::with_capacity(grouped.len());
    for ((volume_id, slice_index), classes) in grouped {
        let n_classes = classes.len();
        let mut values = Vec::new();
        let (mut h, mut w) = (0, 0);
        for (expected, (c, path)) in classes.into_iter().enumerate() {
            if c != expected {
                return Err(Error::data(&path, format!("class channels are not contiguous (missing c{expected})")));
            }
            let img = open_image(&path)?.to_luma16();
            (w, h) = (img.width() as usize, img.height() as usize);
            values.extend(img.into_raw().into_iter().map(|v| v as f32 / 65535.0));
        }
        preds.push(SlicePrediction { volume_id, slice_index, classes: n_classes, h, w, values });
    }
    Ok((preds, manifest))
}

/// `(B, C, H, W)` values split into per-slice predictions.
pub fn predictions_from_batch<T: Real>(values: &Tensor<T>, samples: &[&SliceSample]) -> Result<Vec<SlicePrediction>> {
    let (b, c, h, w) = values.dims4()?;
    if b != samples.len() {
        return Err(Error::Shape(format!("{b} predictions for {} samples", samples.len())));
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| SlicePrediction {
            volume_id: s.volume_id.clone(),
            slice_index: s.slice_index,
            classes: c,
            h,
            w,
            values: values.batch_item(i).data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec { volumes: 2, slices_per_volume: 3, ..SyntheticSpec::default() }
    }

    #[test]
    fn one_hot_examples() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let oh = one_hot::<f32>(&m, 3).unwrap();
        for i in 0..4 {
            let s: f32 = (0..3).map(|c| oh.data()[c * 4 + i]).sum();
            assert_eq!(s, 1.0);
        }
        let z = LabelMap::new(2, 2, vec![0; 4]).unwrap();
        let oh = one_hot::<f32>(&z, 3).unwrap();
        assert_eq!(&oh.data()[..4], &[1.0; 4]);
        assert!(oh.data()[4..].iter().all(|&v| v == 0.0));
        assert!(one_hot::<f32>(&LabelMap::new(1, 1, vec![3]).unwrap(), 3).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.validate(4).unwrap();
            assert_eq!(argmax(&one_hot::<f32>(&s.label, 4).unwrap()).unwrap(), s.label);
            let hist = s.label.histogram(4);
            assert!(hist.iter().all(|&n| n > 0), "every class present: {hist:?}");
        }
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a[0].label, other[0].label);
    }

    #[test]
    fn noiseless_classes_have_constant_intensity() {
        let samples = generate_synthetic(&SyntheticSpec { noise: 0.0, ..small_spec() }).unwrap();
        for s in &samples {
            let mut seen: BTreeMap<u8, f32> = BTreeMap::new();
            for (&l, &v) in s.label.data.iter().zip(s.image.data()) {
                assert_eq!(*seen.entry(l).or_insert(v), v);
            }
        }
    }

    #[test]
    fn augment_identity_flips_and_rotation() {
        let s = generate_synthetic(&small_spec()).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentToggles::none(), &mut rng), s);
        assert_eq!(hflip(&hflip(&s)), s);
        assert_eq!(vflip(&vflip(&s)), s);
        assert_ne!(hflip(&s), s);
        let r = rot90(&s);
        assert_eq!(r.label.histogram(4), s.label.histogram(4));
        assert_eq!(rot90(&rot90(&rot90(&r))), s);
    }

    #[test]
    fn augment_never_invents_labels() {
        let s = generate_synthetic(&small_spec()).unwrap().remove(1);
        let max = s.label.max_label();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = augment(&s, &AugmentToggles::all(), &mut rng);
            assert!(a.label.max_label() <= max);
            assert!(a.image.all_finite());
        }
    }

    #[test]
    fn stem_parsing() {
        assert_eq!(parse_stem("patient_001_7"), Some(("patient_001".into(), 7)));
        assert_eq!(parse_stem("noslice"), None);
        assert_eq!(parse_stem("_3"), None);
    }
}
