//! Model, training and inference hyperparameters, their validation, presets
//! and the TOML file format.
//!
//! A run file has three tables, `[model]`, `[train]` and `[infer]`; field
//! names match the struct fields one to one. Unknown keys are reported as
//! warnings so newer files still load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How HFE features enter the flow model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// `(1 − α)·F + α·C` with a trainable `α` per level.
    Lerp,
    /// `F + C`.
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: [usize; 2],
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub neighborhood_kernels: Vec<usize>,
    pub mapping_depth: usize,
    pub mapping_width: usize,
    pub mapping_hidden: usize,
    pub num_heads_per_level: Vec<usize>,
    pub seg_channels: usize,
    pub image_channels: usize,
    pub input_size: [usize; 2],
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
    #[serde(default = "default_true")]
    pub use_hfe: bool,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    #[serde(default)]
    pub fuse_bottleneck: bool,
}

fn default_ffn_expansion() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_fusion() -> FusionKind {
    FusionKind::Lerp
}

/// Per-sample augmentation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentToggles {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    pub scale: bool,
    pub intensity: bool,
    pub gamma: bool,
    pub noise: bool,
}

impl AugmentToggles {
    pub fn none() -> Self {
        Self { hflip: false, vflip: false, rotate: false, scale: false, intensity: false, gamma: false, noise: false }
    }

    pub fn all() -> Self {
        Self { hflip: true, vflip: true, rotate: true, scale: true, intensity: true, gamma: true, noise: true }
    }

    pub fn any(&self) -> bool {
        *self != Self::none()
    }
}

impl Default for AugmentToggles {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub augment: AugmentToggles,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 1000,
            steps: None,
            warmup_fraction: 0.01,
            seed: 0,
            augment: AugmentToggles::all(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// Optimizer steps for a dataset of `n_samples`.
    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * n_samples.div_ceil(self.batch_size.max(1)))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0) {
            v.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            v.push(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            v.push("weight_decay must be >= 0".into());
        }
        v
    }
}

/// Evenly spaced decode thresholds on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
}

impl ThresholdGrid {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0 < self.lo && self.lo < self.hi && self.hi < 1.0) {
            v.push(format!("threshold grid needs 0 < lo < hi < 1, got [{}, {}]", self.lo, self.hi));
        }
        if self.count < 2 {
            v.push(format!("threshold grid count must be >= 2, got {}", self.count));
        }
        v
    }

    /// `lo + i·(hi − lo)/(count − 1)`, with both endpoints exact.
    pub fn values(&self) -> Vec<f64> {
        let steps = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| match i {
                0 => self.lo,
                i if i == self.count - 1 => self.hi,
                i => self.lo + i as f64 * (self.hi - self.lo) / steps,
            })
            .collect()
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self { count: 100, lo: 0.2, hi: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub euler_steps: usize,
    /// Per-class decode thresholds; empty until calibrated.
    pub thresholds: Vec<f64>,
    pub threshold_grid: ThresholdGrid,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { euler_steps: 3, thresholds: Vec::new(), threshold_grid: ThresholdGrid::default() }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = self.threshold_grid.validate();
        if self.euler_steps == 0 {
            v.push("euler_steps must be >= 1".into());
        }
        v
    }
}

/// Everything a run needs, as stored in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub infer: InferConfig,
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.depths.len()
    }

    /// Token grid `(h, w)` at hierarchy level `level`.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let f = 1 << level;
        (
            self.input_size[0] / self.patch_size[0] / f,
            self.input_size[1] / self.patch_size[1] / f,
        )
    }

    pub fn head_dim(&self, level: usize) -> usize {
        self.widths[level] / self.num_heads_per_level[level]
    }

    /// Every invariant violation; empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let levels = self.depths.len();
        if levels == 0 {
            v.push("depths must not be empty".into());
            return v;
        }
        if self.widths.len() != levels {
            v.push(format!("widths has {} entries, depths has {levels}", self.widths.len()));
        }
        if self.neighborhood_kernels.len() + 1 != levels {
            v.push(format!(
                "neighborhood_kernels needs {} entries (one per non-bottleneck level), got {}",
                levels - 1,
                self.neighborhood_kernels.len()
            ));
        }
        if self.num_heads_per_level.len() != levels {
            v.push(format!("num_heads_per_level has {} entries, depths has {levels}", self.num_heads_per_level.len()));
        }
        for (i, &k) in self.neighborhood_kernels.iter().enumerate() {
            if k % 2 == 0 {
                v.push(format!("kernel must be odd: neighborhood_kernels[{i}] = {k}"));
            } else if k < 3 {
                v.push(format!("kernel must be >= 3: neighborhood_kernels[{i}] = {k}"));
            }
        }
        if self.patch_size.contains(&0) {
            v.push("patch_size must be positive".into());
        } else {
            let f = 1usize << (levels - 1);
            for (axis, (&size, &p)) in self.input_size.iter().zip(&self.patch_size).enumerate() {
                let unit = p * f;
                if size == 0 || size % unit != 0 {
                    v.push(format!(
                        "input_size[{axis}] = {size} not divisible by {unit} (patch {p} x 2^{})",
                        levels - 1
                    ));
                }
            }
        }
        for (l, (&w, &h)) in self.widths.iter().zip(&self.num_heads_per_level).enumerate() {
            if h == 0 || w % h != 0 {
                v.push(format!("widths[{l}] = {w} not divisible by {h} heads"));
            } else if (w / h) % 4 != 0 {
                v.push(format!("head dim {} at level {l} must be divisible by 4 for axial rotary embedding", w / h));
            }
        }
        if self.depths.iter().any(|&d| d == 0) {
            v.push("every depth must be >= 1".into());
        }
        if self.mapping_width == 0 || self.mapping_width % 2 != 0 {
            v.push(format!("mapping_width must be even and positive, got {}", self.mapping_width));
        }
        if self.mapping_depth == 0 || self.mapping_hidden == 0 {
            v.push("mapping_depth and mapping_hidden must be positive".into());
        }
        if self.seg_channels < 2 {
            v.push("seg_channels must be >= 2 (background plus one class)".into());
        }
        if self.image_channels == 0 {
            v.push("image_channels must be >= 1".into());
        }
        if self.ffn_expansion == 0 {
            v.push("ffn_expansion must be >= 1".into());
        }
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

pub const PRESETS: [&str; 3] = ["paper", "tiny", "unit"];

/// Named model configuration.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "paper" => ModelConfig {
            patch_size: [4, 4],
            depths: vec![2, 2, 2],
            widths: vec![128, 256, 384],
            neighborhood_kernels: vec![9, 13],
            mapping_depth: 1,
            mapping_width: 256,
            mapping_hidden: 784,
            num_heads_per_level: vec![2, 4, 6],
            seg_channels: 4,
            image_channels: 1,
            input_size: [224, 224],
            ffn_expansion: 3,
            use_hfe: true,
            fusion: FusionKind::Lerp,
            fuse_bottleneck: false,
        },
        "tiny" => ModelConfig {
            patch_size: [2, 2],
            depths: vec![1, 1, 1],
            widths: vec![32, 64, 96],
            neighborhood_kernels: vec![5, 7],
            mapping_depth: 1,
            mapping_width: 64,
            mapping_hidden: 128,
            num_heads_per_level: vec![1, 2, 3],
            seg_channels: 4,
            image_channels: 1,
            input_size: [64, 64],
            ffn_expansion: 3,
            use_hfe: true,
            fusion: FusionKind::Lerp,
            fuse_bottleneck: false,
        },
        "unit" => ModelConfig {
            patch_size: [2, 2],
            depths: vec![1, 1, 1],
            widths: vec![8, 8, 8],
            neighborhood_kernels: vec![3, 3],
            mapping_depth: 1,
            mapping_width: 8,
            mapping_hidden: 16,
            num_heads_per_level: vec![1, 1, 2],
            seg_channels: 2,
            image_channels: 1,
            input_size: [8, 8],
            ffn_expansion: 3,
            use_hfe: true,
            fusion: FusionKind::Lerp,
            fuse_bottleneck: false,
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Training defaults matched to a preset's scale.
pub fn preset_train(name: &str) -> TrainConfig {
    match name {
        "tiny" | "unit" => TrainConfig {
            learning_rate: 2e-3,
            batch_size: 16,
            steps: Some(500),
            warmup_fraction: 0.02,
            ..TrainConfig::default()
        },
        _ => TrainConfig::default(),
    }
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(Self { model: preset(name)?, train: preset_train(name), infer: InferConfig::default() })
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = self.model.validate();
        v.extend(self.train.validate());
        v.extend(self.infer.validate());
        v
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Parses a run file, returning the config and any unknown-key warnings.
    pub fn from_toml(text: &str, path: &Path) -> Result<(Self, Vec<String>)> {
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), message };
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let warnings = unknown_keys(&table);
        let cfg: RunConfig = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        Ok((cfg, warnings))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }
}

fn unknown_keys(table: &toml::Table) -> Vec<String> {
    const TOP: &[&str] = &["model", "train", "infer"];
    let reference = toml::Table::try_from(RunConfig {
        model: preset("unit").unwrap(),
        train: TrainConfig { steps: Some(1), grad_clip: Some(1.0), ..TrainConfig::default() },
        infer: InferConfig::default(),
    })
    .expect("reference config");
    let mut out = Vec::new();
    for (key, value) in table {
        if !TOP.contains(&key.as_str()) {
            out.push(format!("unknown key `{key}` ignored"));
            continue;
        }
        collect_unknown(key, value, &reference[key], &mut out);
    }
    out
}

fn collect_unknown(prefix: &str, value: &toml::Value, reference: &toml::Value, out: &mut Vec<String>) {
    if let (toml::Value::Table(t), toml::Value::Table(r)) = (value, reference) {
        for (k, v) in t {
            let path = format!("{prefix}.{k}");
            match r.get(k) {
                Some(rv) => collect_unknown(&path, v, rv, out),
                None => out.push(format!("unknown key `{path}` ignored")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            assert!(cfg.validate().is_empty(), "{name}: {:?}", cfg.validate());
        }
    }

    #[test]
    fn paper_preset_matches_table() {
        let cfg = preset("paper").unwrap();
        assert_eq!(cfg.patch_size, [4, 4]);
        assert_eq!(cfg.depths, vec![2, 2, 2]);
        assert_eq!(cfg.widths, vec![128, 256, 384]);
        assert_eq!(cfg.neighborhood_kernels, vec![9, 13]);
        assert_eq!((cfg.mapping_depth, cfg.mapping_width, cfg.mapping_hidden), (1, 256, 784));
        assert_eq!(cfg.grid(0), (56, 56));
        assert_eq!(cfg.grid(1), (28, 28));
        assert_eq!(cfg.grid(2), (14, 14));
        assert_eq!((0..3).map(|l| cfg.head_dim(l)).collect::<Vec<_>>(), vec![64, 64, 64]);
    }

    #[test]
    fn even_kernel_is_a_violation() {
        let mut cfg = preset("paper").unwrap();
        cfg.neighborhood_kernels = vec![8, 13];
        let v = cfg.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("kernel must be odd"), "{v:?}");
    }

    #[test]
    fn indivisible_input_is_a_violation() {
        let mut cfg = preset("paper").unwrap();
        cfg.input_size = [220, 220];
        let v = cfg.validate();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|m| m.contains("not divisible by 16")), "{v:?}");
    }

    #[test]
    fn mismatched_lengths_are_all_reported() {
        let mut cfg = preset("tiny").unwrap();
        cfg.widths.pop();
        cfg.neighborhood_kernels.push(3);
        let v = cfg.validate();
        assert!(v.iter().any(|m| m.contains("widths has 2 entries")));
        assert!(v.iter().any(|m| m.contains("neighborhood_kernels needs 2")));
    }

    #[test]
    fn unknown_preset_errors() {
        assert!(matches!(preset("huge"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_preset("paper").unwrap();
        let text = cfg.to_toml();
        let (back, warnings) = RunConfig::from_toml(&text, Path::new("mem.toml")).unwrap();
        assert_eq!(back, cfg);
        assert!(warnings.is_empty());
    }

    #[test]
    fn missing_field_names_it() {
        let cfg = RunConfig::from_preset("tiny").unwrap();
        let mut table = toml::Table::try_from(&cfg).unwrap();
        table["model"].as_table_mut().unwrap().remove("widths");
        let text = toml::to_string(&table).unwrap();
        let err = RunConfig::from_toml(&text, Path::new("cfg.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("widths") && msg.contains("cfg.toml"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn unknown_key_warns() {
        let cfg = RunConfig::from_preset("tiny").unwrap();
        let text = cfg.to_toml().replace("[model]\n", "[model]\nflux_capacitor = 3\n") + "\nextra = 1\n";
        let (back, warnings) = RunConfig::from_toml(&text, Path::new("cfg.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(warnings.len(), 2, "{warnings:?}");
        assert!(warnings[0].contains("model.flux_capacitor") || warnings[1].contains("model.flux_capacitor"));
    }

    #[test]
    fn grid_endpoints_exact() {
        let g = ThresholdGrid::default();
        let v = g.values();
        assert_eq!(v.len(), 100);
        assert_eq!(v[0], 0.2);
        assert_eq!(v[99], 0.8);
        assert!((v[1] - v[0] - 0.6 / 99.0).abs() < 1e-15);
    }
}
