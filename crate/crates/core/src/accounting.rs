//! Parameter and FLOP accounting.
//!
//! Counting convention: one multiply-accumulate is 2 FLOPs; linear layers
//! are charged `2·rows·d_in·d_out` (bias adds free); each attention query-key
//! pair costs `4·head_dim` (score and weighted value) plus 5 for the softmax;
//! RMS normalization costs 5 per element. Residual adds, activations, rotary
//! rotations and lerps are not charged. The instrumented counter in
//! [`crate::graph`] follows the same rules, so the two agree exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::graph::{AttnSpan, NORM_FLOPS_PER_ELEM, SOFTMAX_FLOPS_PER_ELEM};
use crate::model::RfHit;
use crate::tensor::Real;

pub const CONVENTION: &str = "1 MAC = 2 FLOPs; softmax and RMS norm 5 FLOPs/element; elementwise glue not counted";

/// Reference efficiency figures for the full-size model.
pub const REFERENCE_PARAMS: f64 = 13.6e6;
pub const REFERENCE_GFLOPS: f64 = 10.14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub module: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub input_size: [usize; 2],
    pub entries: Vec<CostEntry>,
    pub total_params: usize,
    pub hfm_params: usize,
    pub hfe_params: usize,
    /// One velocity evaluation of the flow model, batch 1.
    pub hfm_flops: u64,
    /// One pass of the feature encoder, batch 1.
    pub hfe_flops: u64,
}

impl CostReport {
    /// What the report calls a single forward: one flow-model evaluation.
    pub fn single_forward_flops(&self) -> u64 {
        self.hfm_flops
    }

    /// `steps` flow-model evaluations plus one encoder pass.
    pub fn trajectory_flops(&self, steps: usize) -> u64 {
        steps as u64 * self.hfm_flops + self.hfe_flops
    }

    /// Structured text; `reference` adds the comparison against the full-size figures.
    pub fn render(&self, steps: usize, reference: bool) -> String {
        let g = |f: u64| f as f64 / 1e9;
        let mut s = String::new();
        let _ = writeln!(s, "convention: {}", self.convention);
        let _ = writeln!(s, "input: {}x{}, batch 1", self.input_size[0], self.input_size[1]);
        let _ = writeln!(s, "{:<18}{:>14}{:>14}", "module", "params", "GFLOPs");
        for e in &self.entries {
            let _ = writeln!(s, "{:<18}{:>14}{:>14.4}", e.module, e.params, g(e.flops));
        }
        let _ = writeln!(s, "params_total={} ({:.2}M)", self.total_params, self.total_params as f64 / 1e6);
        let _ = writeln!(s, "params_hfm={} params_hfe={}", self.hfm_params, self.hfe_params);
        let _ = writeln!(s, "gflops_single_forward={:.4} (one flow-model evaluation)", g(self.single_forward_flops()));
        let _ = writeln!(s, "gflops_hfm_plus_hfe={:.4}", g(self.hfm_flops + self.hfe_flops));
        let _ = writeln!(s, "gflops_trajectory_n{steps}={:.4} ({steps} x flow model + 1 x encoder)", g(self.trajectory_flops(steps)));
        if reference {
            let p = self.total_params as f64;
            let f = g(self.single_forward_flops());
            let p_ok = (0.8 * REFERENCE_PARAMS..=1.2 * REFERENCE_PARAMS).contains(&p);
            let f_ok = (REFERENCE_GFLOPS / 2.0..=REFERENCE_GFLOPS * 2.0).contains(&f);
            let _ = writeln!(
                s,
                "reference: {:.1}M params, {:.2} GFLOPs; params within 20%: {}; GFLOPs within 2x: {}",
                REFERENCE_PARAMS / 1e6,
                REFERENCE_GFLOPS,
                if p_ok { "yes" } else { "NO" },
                if f_ok { "yes" } else { "NO" }
            );
        }
        s
    }
}

/// Submodule key: the first two dotted name components with trailing
/// indices kept (`hfm.enc0`, `hfe.proj1`, ...).
fn module_key(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

/// Parameter counts per submodule by enumerating the store.
pub fn count_params<T: Real>(model: &RfHit<T>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in model.store.entries() {
        *out.entry(module_key(&e.name)).or_default() += e.value.len();
    }
    out
}

fn linear(rows: usize, din: usize, dout: usize) -> u64 {
    2 * (rows * din * dout) as u64
}

/// Cost of one transformer block at `level` on `tokens` tokens.
fn block_flops(cfg: &ModelConfig, level: usize, span: AttnSpan, ada: bool) -> u64 {
    let (gh, gw) = cfg.grid(level);
    let n = gh * gw;
    let w = cfg.widths[level];
    let heads = cfg.num_heads_per_level[level];
    let hd = w / heads;
    let e = cfg.ffn_expansion;
    let mut f = 2 * NORM_FLOPS_PER_ELEM * (n * w) as u64;
    if ada {
        f += 2 * linear(1, cfg.mapping_width, w);
    }
    let comparisons = (heads * n * span.keys_per_query(gh, gw)) as u64;
    f += linear(n, w, 3 * w) + comparisons * (4 * hd as u64 + SOFTMAX_FLOPS_PER_ELEM) + linear(n, w, w);
    f += linear(n, w, 2 * e * w) + linear(n, e * w, w);
    f
}

/// Analytic FLOPs per submodule for batch 1.
pub fn count_flops(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let mut out: BTreeMap<String, u64> = BTreeMap::new();
    let levels = cfg.levels();
    let [ph, pw] = cfg.patch_size;
    let tokens = |l: usize| cfg.grid(l).0 * cfg.grid(l).1;
    let mut add = |k: String, f: u64| *out.entry(k).or_default() += f;

    add("hfm.patchify".into(), linear(tokens(0), (cfg.seg_channels + cfg.image_channels) * ph * pw, cfg.widths[0]));
    add("hfm.mapping".into(), cfg.mapping_depth as u64 * 2 * linear(1, cfg.mapping_width, cfg.mapping_hidden));
    for l in 0..levels - 1 {
        let span = AttnSpan::Neighborhood(cfg.neighborhood_kernels[l]);
        let per = block_flops(cfg, l, span, true) * cfg.depths[l] as u64;
        add(format!("hfm.enc{l}"), per);
        add(format!("hfm.dec{l}"), per);
        let merge = linear(tokens(l + 1), 4 * cfg.widths[l], cfg.widths[l + 1]);
        add(format!("hfm.merge{l}"), merge);
        add(format!("hfm.split{l}"), merge);
    }
    add("hfm.mid".into(), block_flops(cfg, levels - 1, AttnSpan::Global, true) * cfg.depths[levels - 1] as u64);
    add("hfm.final_norm".into(), NORM_FLOPS_PER_ELEM * (tokens(0) * cfg.widths[0]) as u64);
    add("hfm.head".into(), linear(tokens(0), cfg.widths[0], cfg.seg_channels * ph * pw));

    if cfg.use_hfe {
        add("hfe.patchify".into(), linear(tokens(0), cfg.image_channels * ph * pw, cfg.widths[0]));
        let fused = levels - 1 + usize::from(cfg.fuse_bottleneck);
        for l in 0..fused {
            if l > 0 {
                add(format!("hfe.merge{}", l - 1), linear(tokens(l), 4 * cfg.widths[l - 1], cfg.widths[l]));
            }
            if l < levels - 1 {
                let span = AttnSpan::Neighborhood(cfg.neighborhood_kernels[l]);
                add(format!("hfe.level{l}"), block_flops(cfg, l, span, false) * cfg.depths[l] as u64);
            }
            add(format!("hfe.proj{l}"), linear(tokens(l), cfg.widths[l], cfg.widths[l]));
        }
    }
    out
}

/// Full report for a configuration (parameters by instantiation, FLOPs analytically).
pub fn cost_report(cfg: &ModelConfig) -> crate::Result<CostReport> {
    let model = RfHit::<f32>::new(cfg, 0)?;
    let params = count_params(&model);
    let flops = count_flops(cfg);
    let keys: std::collections::BTreeSet<&String> = params.keys().chain(flops.keys()).collect();
    let entries: Vec<CostEntry> = keys
        .into_iter()
        .map(|k| CostEntry {
            module: k.clone(),
            params: params.get(k).copied().unwrap_or(0),
            flops: flops.get(k).copied().unwrap_or(0),
        })
        .collect();
    let sum = |prefix: &str| entries.iter().filter(|e| e.module.starts_with(prefix)).map(|e| e.flops).sum();
    Ok(CostReport {
        convention: CONVENTION.into(),
        input_size: cfg.input_size,
        total_params: model.param_count(),
        hfm_params: model.hfm_param_count(),
        hfe_params: model.hfe_param_count(),
        hfm_flops: sum("hfm."),
        hfe_flops: sum("hfe."),
        entries,
    })
}
