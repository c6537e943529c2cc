//! Volume metrics: Dice, HD95, slice stacking, threshold decoding and
//! per-class threshold calibration.
//!
//! HD95 conventions: a surface voxel is foreground with at least one
//! background 6-neighbour or lying on the volume border; distances from each
//! surface to the other are pooled into one multiset and the 95th percentile
//! is linearly interpolated at rank `0.95·(n − 1)`. Both masks empty gives 0;
//! exactly one empty gives [`Hd95::Undefined`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::config::ThresholdGrid;
use crate::data::{LabelMap, Manifest, SlicePrediction, SliceSample};
use crate::error::{Error, Result};

/// Binary `(D, H, W)` volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinVolume {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl BinVolume {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("volume {shape:?} with {} voxels", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("non-binary voxel value {v}")));
        }
        Ok(Self { shape, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    /// Foreground voxels with a background 6-neighbour or on the border.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.shape;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if self.data[self.idx(z, y, x)] == 0 {
                        continue;
                    }
                    let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                    let exposed = border
                        || self.data[self.idx(z - 1, y, x)] == 0
                        || self.data[self.idx(z + 1, y, x)] == 0
                        || self.data[self.idx(z, y - 1, x)] == 0
                        || self.data[self.idx(z, y + 1, x)] == 0
                        || self.data[self.idx(z, y, x - 1)] == 0
                        || self.data[self.idx(z, y, x + 1)] == 0;
                    if exposed {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn check_shapes(a: &BinVolume, b: &BinVolume) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("volume shapes {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &BinVolume, gt: &BinVolume) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (a, b) = (pred.count(), gt.count());
    if a + b == 0 {
        return Ok(1.0);
    }
    let inter: usize = pred.data.iter().zip(&gt.data).map(|(&p, &g)| (p & g) as usize).sum();
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// HD95 outcome; undefined when exactly one mask is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Hd95 {
    Value(f64),
    Undefined,
}

impl Hd95 {
    pub fn value(self) -> Option<f64> {
        match self {
            Hd95::Value(v) => Some(v),
            Hd95::Undefined => None,
        }
    }
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// Symmetric 95th-percentile surface distance in millimetres; `spacing` is
/// per axis (slice, row, column).
pub fn hd95(pred: &BinVolume, gt: &BinVolume, spacing: [f64; 3]) -> Result<Hd95> {
    check_shapes(pred, gt)?;
    let (sp, sg) = (pred.surface(), gt.surface());
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(Hd95::Value(0.0)),
        (true, false) | (false, true) => return Ok(Hd95::Undefined),
        _ => {}
    }
    let to_gt = squared_edt(gt.shape, &sg, spacing);
    let to_pred = squared_edt(pred.shape, &sp, spacing);
    let mut dists: Vec<f64> = sp
        .iter()
        .map(|&[z, y, x]| to_gt[gt.idx(z, y, x)].sqrt())
        .chain(sg.iter().map(|&[z, y, x]| to_pred[pred.idx(z, y, x)].sqrt()))
        .collect();
    Ok(Hd95::Value(percentile(&mut dists, 0.95)))
}

/// Exact squared Euclidean distance to the nearest of `sites`, by separable
/// lower envelopes of parabolas along each axis.
fn squared_edt(shape: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut f = vec![f64::INFINITY; d * h * w];
    for &[z, y, x] in sites {
        f[(z * h + y) * w + x] = 0.0;
    }
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        let s2 = spacing[axis] * spacing[axis];
        for start in 0..d * h * w {
            // visit each line once, from its first element
            let coord = (start / stride) % n;
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| f[start + i * stride]));
            envelope(&line, s2, &mut out);
            for (i, &v) in out.iter().enumerate() {
                f[start + i * stride] = v;
            }
        }
    }
    f
}

/// One-dimensional distance transform of sampled function `f` with squared
/// unit step `s2`: `out[q] = min_p f[p] + s2·(q − p)²`.
fn envelope(f: &[f64], s2: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let inter = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for &q in &finite {
        while let Some(&p) = v.last() {
            let s = inter(p, q);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            let s = inter(*v.last().unwrap(), q);
            v.push(q);
            z.push(s);
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = f[p] + s2 * dq * dq;
    }
}

/// Per-class values `(C, D, H, W)` for one reconstructed volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SegVolume {
    pub volume_id: String,
    pub classes: usize,
    pub shape: [usize; 3],
    pub values: Vec<f32>,
    pub spacing: [f64; 3],
}

impl SegVolume {
    fn class_slice(&self, c: usize) -> &[f32] {
        let n: usize = self.shape.iter().product();
        &self.values[c * n..(c + 1) * n]
    }

    /// `value_c ≥ threshold_c`, each class independently.
    pub fn decode(&self, thresholds: &[f64]) -> Result<Vec<BinVolume>> {
        if thresholds.len() != self.classes {
            return Err(Error::InvalidArgument(format!(
                "{} thresholds for {} classes",
                thresholds.len(),
                self.classes
            )));
        }
        Ok((0..self.classes)
            .map(|c| BinVolume {
                shape: self.shape,
                data: self.class_slice(c).iter().map(|&v| u8::from(v as f64 >= thresholds[c])).collect(),
            })
            .collect())
    }

    /// Binary class masks where the values are already 0/1 (ground truth).
    pub fn masks(&self) -> Vec<BinVolume> {
        self.decode(&vec![0.5; self.classes]).expect("threshold count matches")
    }
}

/// Free-standing form of [`SegVolume::decode`].
pub fn decode(volume: &SegVolume, thresholds: &[f64]) -> Result<Vec<BinVolume>> {
    volume.decode(thresholds)
}

/// Stacks slice predictions into volumes ordered by slice index, following
/// the manifest's volume order. Every manifest slice must be present once.
pub fn stack_slices(preds: &[SlicePrediction], manifest: &Manifest) -> Result<Vec<SegVolume>> {
    let mut by_volume: BTreeMap<&str, BTreeMap<usize, &SlicePrediction>> = BTreeMap::new();
    for p in preds {
        if !manifest.volumes.iter().any(|v| v.id == p.volume_id) {
            return Err(Error::InvalidArgument(format!("slice {}_{} belongs to no known volume", p.volume_id, p.slice_index)));
        }
        if by_volume.entry(&p.volume_id).or_default().insert(p.slice_index, p).is_some() {
            return Err(Error::DuplicateSlice { volume: p.volume_id.clone(), index: p.slice_index });
        }
    }
    let mut out = Vec::with_capacity(manifest.volumes.len());
    for info in &manifest.volumes {
        let slices = by_volume.remove(info.id.as_str()).unwrap_or_default();
        if let Some((&idx, _)) = slices.range(info.slices..).next() {
            return Err(Error::InvalidArgument(format!(
                "slice {}_{idx} beyond the {} slices listed",
                info.id, info.slices
            )));
        }
        let first = (0..info.slices)
            .map(|i| slices.get(&i).ok_or_else(|| Error::MissingSlice { volume: info.id.clone(), index: i }))
            .collect::<Result<Vec<_>>>()?;
        let Some(p0) = first.first() else {
            continue;
        };
        let (c, h, w) = (p0.classes, p0.h, p0.w);
        for p in &first {
            if (p.classes, p.h, p.w) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "slice {}_{} is {}x{}x{}, expected {c}x{h}x{w}",
                    p.volume_id, p.slice_index, p.classes, p.h, p.w
                )));
            }
        }
        let d = first.len();
        let plane = h * w;
        let mut values = vec![0f32; c * d * plane];
        for (z, p) in first.iter().enumerate() {
            for k in 0..c {
                values[(k * d + z) * plane..(k * d + z + 1) * plane].copy_from_slice(&p.values[k * plane..(k + 1) * plane]);
            }
        }
        out.push(SegVolume { volume_id: info.id.clone(), classes: c, shape: [d, h, w], values, spacing: info.spacing });
    }
    Ok(out)
}

/// Ground-truth volumes as one-hot values, stacked like [`stack_slices`].
pub fn stack_labels(samples: &[SliceSample], manifest: &Manifest, classes: usize) -> Result<Vec<SegVolume>> {
    let preds: Vec<SlicePrediction> = samples
        .iter()
        .map(|s| {
            let n = s.label.h * s.label.w;
            let mut values = vec![0f32; classes * n];
            for (i, &l) in s.label.data.iter().enumerate() {
                if l as usize >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "{}_{}: label {l} >= {classes} classes",
                        s.volume_id, s.slice_index
                    )));
                }
                values[l as usize * n + i] = 1.0;
            }
            Ok(SlicePrediction {
                volume_id: s.volume_id.clone(),
                slice_index: s.slice_index,
                classes,
                h: s.label.h,
                w: s.label.w,
                values,
            })
        })
        .collect::<Result<_>>()?;
    stack_slices(&preds, manifest)
}

/// Pairs predictions with ground truth by volume id.
fn pair_volumes<'a>(preds: &'a [SegVolume], gts: &'a [SegVolume]) -> Result<Vec<(&'a SegVolume, &'a SegVolume)>> {
    gts.iter()
        .map(|g| {
            let p = preds
                .iter()
                .find(|p| p.volume_id == g.volume_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no prediction for volume {}", g.volume_id)))?;
            if p.shape != g.shape || p.classes != g.classes {
                return Err(Error::Shape(format!(
                    "volume {}: prediction {}x{:?}, ground truth {}x{:?}",
                    g.volume_id, p.classes, p.shape, g.classes, g.shape
                )));
            }
            Ok((p, g))
        })
        .collect()
}

/// For every class, the grid value maximizing mean per-volume Dice; ties go
/// to the lowest threshold.
pub fn calibrate_thresholds(preds: &[SegVolume], gts: &[SegVolume], grid: &ThresholdGrid) -> Result<Vec<f64>> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one validation volume".into()));
    }
    let mut pairs = pair_volumes(preds, gts)?;
    // a fixed summation order keeps near-ties stable under reordering
    pairs.sort_by(|a, b| a.1.volume_id.cmp(&b.1.volume_id));
    let grid = grid.values();
    let classes = gts[0].classes;
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut sums = vec![0.0; grid.len()];
        for (p, g) in &pairs {
            // sorted values overall and on ground-truth voxels; counts above a
            // threshold come from a binary search
            let vals = p.class_slice(c);
            let truth = g.class_slice(c);
            let mut all: Vec<f32> = vals.to_vec();
            let mut on_gt: Vec<f32> = vals.iter().zip(truth).filter(|(_, &t)| t >= 0.5).map(|(&v, _)| v).collect();
            all.sort_by(|a, b| a.total_cmp(b));
            on_gt.sort_by(|a, b| a.total_cmp(b));
            let gt_count = on_gt.len();
            for (i, &t) in grid.iter().enumerate() {
                let above = |s: &[f32]| s.len() - s.partition_point(|&v| (v as f64) < t);
                let (pc, inter) = (above(&all), above(&on_gt));
                sums[i] += if pc + gt_count == 0 { 1.0 } else { 2.0 * inter as f64 / (pc + gt_count) as f64 };
            }
        }
        let mut best = 0;
        for i in 1..grid.len() {
            if sums[i] > sums[best] {
                best = i;
            }
        }
        out.push(grid[best]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    /// Per foreground class.
    pub dice: Vec<f64>,
    pub hd95: Vec<Hd95>,
}

/// Per-volume and averaged metrics over foreground classes `1..C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub volumes: Vec<VolumeMetrics>,
    pub dice: Vec<f64>,
    /// Mean over volumes where defined.
    pub hd95: Vec<Option<f64>>,
    /// Volumes excluded from each HD95 mean.
    pub hd95_undefined: Vec<usize>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

/// Display names of foreground classes.
pub fn class_names(classes: usize) -> Vec<String> {
    if classes == 4 {
        return vec!["RV".into(), "Myo".into(), "LV".into()];
    }
    (1..classes).map(|c| format!("C{c}")).collect()
}

pub fn evaluate(preds: &[SegVolume], gts: &[SegVolume], thresholds: &[f64]) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one volume".into()));
    }
    let pairs = pair_volumes(preds, gts)?;
    let classes = gts[0].classes;
    let mut volumes = Vec::with_capacity(pairs.len());
    for (p, g) in pairs {
        let pb = p.decode(thresholds)?;
        let gb = g.masks();
        let mut dice_v = Vec::with_capacity(classes - 1);
        let mut hd_v = Vec::with_capacity(classes - 1);
        for c in 1..classes {
            dice_v.push(dice(&pb[c], &gb[c])?);
            hd_v.push(hd95(&pb[c], &gb[c], g.spacing)?);
        }
        volumes.push(VolumeMetrics { volume_id: g.volume_id.clone(), dice: dice_v, hd95: hd_v });
    }
    let n = volumes.len() as f64;
    let dice_mean: Vec<f64> = (0..classes - 1).map(|c| volumes.iter().map(|v| v.dice[c]).sum::<f64>() / n).collect();
    let mut hd_mean = Vec::new();
    let mut undefined = Vec::new();
    for c in 0..classes - 1 {
        let vals: Vec<f64> = volumes.iter().filter_map(|v| v.hd95[c].value()).collect();
        undefined.push(volumes.len() - vals.len());
        hd_mean.push((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
    }
    let mean_dice = dice_mean.iter().sum::<f64>() / dice_mean.len() as f64;
    let defined: Vec<f64> = hd_mean.iter().flatten().copied().collect();
    let mean_hd95 = (defined.len() == hd_mean.len()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport {
        class_names: class_names(classes),
        volumes,
        dice: dice_mean,
        hd95: hd_mean,
        hd95_undefined: undefined,
        mean_dice,
        mean_hd95,
    })
}

impl EvalReport {
    /// Text table: one row per metric, per-class columns then `Avg.`.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "Metric");
        for name in &self.class_names {
            let _ = write!(s, "{name:>10}");
        }
        let _ = writeln!(s, "{:>10}", "Avg.");
        let _ = write!(s, "{:<10}", "Dice (%)");
        for d in &self.dice {
            let _ = write!(s, "{:>10.2}", 100.0 * d);
        }
        let _ = writeln!(s, "{:>10.2}", 100.0 * self.mean_dice);
        let _ = write!(s, "{:<10}", "HD95 (mm)");
        let fmt = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |v| format!("{v:.2}"));
        for h in &self.hd95 {
            let _ = write!(s, "{:>10}", fmt(*h));
        }
        let _ = writeln!(s, "{:>10}", fmt(self.mean_hd95));
        let excluded: usize = self.hd95_undefined.iter().sum();
        if excluded > 0 {
            let _ = writeln!(
                s,
                "note: HD95 undefined (one mask empty) for {excluded} class-volume pairs; excluded from means"
            );
        }
        s
    }
}

/// Colour-coded comparison of one slice: true positives white, false
/// positives red, false negatives blue, background black.
pub fn write_error_map(path: &Path, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::Shape(format!("error map {}x{} vs {}x{}", pred.h, pred.w, gt.h, gt.w)));
    }
    let img = ImageBuffer::from_fn(pred.w as u32, pred.h as u32, |x, y| {
        let (p, g) = (pred.get(y as usize, x as usize), gt.get(y as usize, x as usize));
        Rgb::<u8>(match (p, g) {
            (0, 0) => [0, 0, 0],
            (p, g) if p == g => [255, 255, 255],
            (_, 0) => [220, 40, 40],
            (0, _) => [40, 80, 220],
            _ => [230, 200, 40],
        })
    });
    img.save(path).map_err(|e| Error::data(path, format!("cannot write PNG: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VolumeInfo;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(shape: [usize; 3], on: &[[usize; 3]]) -> BinVolume {
        let mut data = vec![0; shape.iter().product()];
        for &[z, y, x] in on {
            data[(z * shape[1] + y) * shape[2] + x] = 1;
        }
        BinVolume::new(shape, data).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = vol([1, 2, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let b = vol([1, 2, 4], &[[0, 0, 0], [0, 0, 1], [0, 1, 2], [0, 1, 3]]);
        let c = vol([1, 2, 4], &[[0, 1, 0]]);
        let e = vol([1, 2, 4], &[]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &a).unwrap(), 0.0);
        assert!(dice(&a, &vol([1, 4, 2], &[])).is_err());
        assert!(BinVolume::new([1, 1, 2], vec![0, 2]).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = vol([8, 8, 8], &[[1, 1, 1]]);
        let b = vol([8, 8, 8], &[[4, 5, 1]]);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), Hd95::Value(5.0));
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), Hd95::Value(0.0));
        let e = vol([8, 8, 8], &[]);
        assert_eq!(hd95(&e, &e, [1.0; 3]).unwrap(), Hd95::Value(0.0));
        assert_eq!(hd95(&a, &e, [1.0; 3]).unwrap(), Hd95::Undefined);
        assert_eq!(hd95(&a, &b, [2.0, 1.0, 1.0]).unwrap(), Hd95::Value((36.0f64 + 16.0).sqrt()));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&mut [3.0, 1.0, 2.0], 0.5), 2.0);
        assert!((percentile(&mut [0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let shape = [rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..7)];
            let n: usize = shape.iter().product();
            let sites: Vec<[usize; 3]> = (0..n)
                .filter(|_| rng.random_bool(0.2))
                .map(|i| [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]])
                .collect();
            let sp = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
            let got = squared_edt(shape, &sites, sp);
            for i in 0..n {
                let p = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
                let want = sites
                    .iter()
                    .map(|s| (0..3).map(|k| ((p[k] as f64 - s[k] as f64) * sp[k]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!(want == got[i] || (want - got[i]).abs() < 1e-9, "{want} vs {}", got[i]);
            }
        }
    }

    fn slice(v: &str, i: usize, classes: usize, fill: f32) -> SlicePrediction {
        SlicePrediction { volume_id: v.into(), slice_index: i, classes, h: 4, w: 4, values: vec![fill; classes * 16] }
    }

    fn manifest(slices: usize) -> Manifest {
        Manifest { volumes: vec![VolumeInfo { id: "v".into(), slices, spacing: [1.0; 3] }] }
    }

    #[test]
    fn stacking_contract() {
        let preds: Vec<_> = (0..3).map(|i| slice("v", i, 2, i as f32)).collect();
        let vols = stack_slices(&preds, &manifest(3)).unwrap();
        assert_eq!(vols[0].shape, [3, 4, 4]);
        assert_eq!(vols[0].classes, 2);
        assert_eq!(vols[0].values.len(), 2 * 3 * 16);
        let shuffled = vec![preds[2].clone(), preds[0].clone(), preds[1].clone()];
        assert_eq!(stack_slices(&shuffled, &manifest(3)).unwrap(), vols);
        let missing = vec![preds[0].clone(), preds[2].clone()];
        match stack_slices(&missing, &manifest(3)) {
            Err(Error::MissingSlice { volume, index }) => assert_eq!((volume.as_str(), index), ("v", 1)),
            other => panic!("expected missing slice, got {other:?}"),
        }
        let dup = vec![preds[0].clone(), preds[0].clone(), preds[1].clone(), preds[2].clone()];
        assert!(matches!(stack_slices(&dup, &manifest(3)), Err(Error::DuplicateSlice { .. })));
    }

    #[test]
    fn decode_semantics() {
        let mut v = stack_slices(&[slice("v", 0, 1, 0.4)], &manifest(1)).unwrap().remove(0);
        v.values[0] = 0.6;
        let b = v.decode(&[0.5]).unwrap();
        assert_eq!(b[0].data[0], 1);
        assert_eq!(b[0].data[1], 0);
        let all = stack_slices(&[slice("v", 0, 1, 0.2)], &manifest(1)).unwrap().remove(0);
        assert!(all.decode(&[0.2]).unwrap()[0].data.iter().all(|&x| x == 1));
        assert!(v.decode(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn binary_predictions_calibrate_to_lowest() {
        let gt = stack_slices(&[slice("v", 0, 2, 0.0)], &manifest(1)).unwrap();
        let mut p = gt.clone();
        for (i, v) in p[0].values.iter_mut().enumerate() {
            *v = (i % 3 == 0) as u8 as f32;
        }
        let t = calibrate_thresholds(&p, &gt, &ThresholdGrid::default()).unwrap();
        assert_eq!(t, vec![0.2, 0.2]);
        assert!(calibrate_thresholds(&p, &[], &ThresholdGrid::default()).is_err());
    }

    #[test]
    fn evaluation_of_perfect_predictions() {
        let mut s = slice("v", 0, 4, 0.0);
        for i in 0..16 {
            s.values[(i % 4) * 16 + i] = 1.0;
        }
        let gt = stack_slices(&[s], &manifest(1)).unwrap();
        let r = evaluate(&gt, &gt, &[0.5; 4]).unwrap();
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(r.mean_hd95, Some(0.0));
        assert!(r.table().lines().next().unwrap().trim_end().ends_with("Avg."));
        assert!(evaluate(&[], &gt, &[0.5; 4]).is_err());
    }
}
