//! Encoder and fusion ablations: the variants train on the same data with the
//! same seeds and differ only in the model switch under study.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use rfhit::config::{FusionKind, RunConfig};
use rfhit::data::Dataset;
use rfhit::pipeline::assess;
use rfhit::trainer::Trainer;

use crate::source::{self, Geometry, Split};
use crate::AblateArgs;

/// Full-scale cardiac mean Dice (%) quoted next to the desk-scale numbers.
pub const REFERENCE_WITHOUT_HFE: f64 = 90.69;
pub const REFERENCE_ADDITION: f64 = 91.09;
pub const REFERENCE_FULL: f64 = 91.27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Flow model alone.
    WithoutHfe,
    /// Encoder features added to the flow model's tokens.
    Addition,
    /// Encoder features blended by a learnable lerp.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::WithoutHfe, Variant::Addition, Variant::Full];

    fn configure(self, rc: &RunConfig) -> RunConfig {
        let mut rc = rc.clone();
        let m = &mut rc.model;
        (m.use_hfe, m.fusion) = match self {
            Variant::WithoutHfe => (false, FusionKind::Lerp),
            Variant::Addition => (true, FusionKind::Add),
            Variant::Full => (true, FusionKind::Lerp),
        };
        rc
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub params: usize,
    pub final_loss: f64,
    /// Per foreground class, held-out split.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Ablation {
    pub steps: usize,
    pub seed: u64,
    pub euler_steps: usize,
    pub results: Vec<VariantResult>,
}

impl Ablation {
    pub fn mean_dice(&self, v: Variant) -> f64 {
        self.results.iter().find(|r| r.variant == v).map_or(f64::NAN, |r| r.mean_dice)
    }

    /// Two tables: encoder on/off and addition vs lerp, with reference annotations.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let table = |s: &mut String, name: &str, rows: [(&str, Variant, f64); 2]| {
            let _ = writeln!(s, "Table {name}");
            let _ = writeln!(s, "{:<12}{:>12}{:>16}", "Variant", "Dice (%)", "Reference (%)*");
            for (label, v, reference) in rows {
                let _ = writeln!(s, "{label:<12}{:>12.2}{reference:>16.2}", 100.0 * self.mean_dice(v));
            }
            let ours = 100.0 * (self.mean_dice(rows[1].1) - self.mean_dice(rows[0].1));
            let theirs = rows[1].2 - rows[0].2;
            let verdict = if ours.signum() == theirs.signum() { "same direction" } else { "opposite direction" };
            let _ = writeln!(
                s,
                "{} minus {}: {ours:+.2} here, {theirs:+.2} in the reference ({verdict})",
                rows[1].0, rows[0].0
            );
            let _ = writeln!(s);
        };
        table(
            &mut s,
            "ablation_hfe",
            [("w/o HFE", Variant::WithoutHfe, REFERENCE_WITHOUT_HFE), ("w/ HFE", Variant::Full, REFERENCE_FULL)],
        );
        table(
            &mut s,
            "ablation_fusion",
            [("addition", Variant::Addition, REFERENCE_ADDITION), ("lerp", Variant::Full, REFERENCE_FULL)],
        );
        let _ = writeln!(
            s,
            "* full-scale cardiac results, for context only. Desk-scale runs: {} steps, seed {}, N={} Euler steps, \
             thresholds calibrated on the validation split, Dice on the held-out split.",
            self.steps, self.seed, self.euler_steps
        );
        s
    }
}

/// Trains and scores every variant on the same splits with the same seeds.
pub fn run_variants(
    base: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    euler_steps: usize,
    log: &mut dyn Write,
) -> Result<Ablation> {
    let total = base.train.total_steps(train.len());
    let mut results = Vec::new();
    for v in Variant::ALL {
        let rc = v.configure(base);
        let mut trainer = Trainer::new(&rc.model, &rc.train, total)?;
        writeln!(log, "variant {v:?}: {} parameters, {total} steps", trainer.model.param_count())?;
        let mut final_loss = f64::NAN;
        trainer.fit(train, |s| {
            final_loss = s.loss;
            Ok(())
        })?;
        let a = assess(&trainer.model, val, test, euler_steps, rc.train.seed, &rc.infer.threshold_grid)?;
        writeln!(log, "variant {v:?}: final loss {final_loss:.5}, mean Dice {:.4}", a.report.mean_dice)?;
        results.push(VariantResult {
            variant: v,
            params: trainer.model.param_count(),
            final_loss,
            dice: a.report.dice.clone(),
            mean_dice: a.report.mean_dice,
        });
    }
    Ok(Ablation { steps: total, seed: base.train.seed, euler_steps, results })
}

pub fn ablate(a: &AblateArgs, root: &Path, out: &mut dyn Write) -> Result<Ablation> {
    let mut rc = a.config.resolve(out)?;
    if let Some(s) = a.steps {
        rc.train.steps = Some(s);
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    let geo = Geometry::of_model(&rc.model);
    let load = |split| source::load(&a.data.data, split, geo, a.data.data_seed);
    let (train, val, test) = match &a.data.data {
        source::DataSource::Synthetic => (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?),
        source::DataSource::Folder(_) => {
            // folders are split by volume: 70% train, 15% validation, 15% test
            let all = load(Split::Train)?;
            let n = all.volumes.len();
            let n_train = (n * 7 / 10).max(1);
            let n_val = ((n - n_train) / 2).max(1);
            let (train, rest) = all.split_volumes(n_train);
            let (val, test) = rest.split_volumes(n_val);
            anyhow::ensure!(!test.is_empty(), "slice folder has too few volumes ({n}) for a three-way split");
            (train, val, test)
        }
    };
    let ablation = run_variants(&rc, &train, &val, &test, a.euler_steps, out)?;
    let text = ablation.render();
    write!(out, "{text}")?;
    let dir = a.out.clone().unwrap_or_else(|| root.join("ablation"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("ablation.txt"), &text).with_context(|| format!("writing {}", dir.display()))?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&ablation)?)
        .with_context(|| format!("writing {}", dir.display()))?;
    Ok(ablation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake() -> Ablation {
        let r = |variant, mean_dice| VariantResult { variant, params: 0, final_loss: 0.0, dice: vec![], mean_dice };
        Ablation {
            steps: 10,
            seed: 0,
            euler_steps: 3,
            results: vec![r(Variant::WithoutHfe, 0.80), r(Variant::Addition, 0.85), r(Variant::Full, 0.84)],
        }
    }

    #[test]
    fn tables_have_the_expected_rows_and_annotations() {
        let text = fake().render();
        let hfe = text.split("Table ablation_fusion").next().unwrap();
        let rows: Vec<&str> = hfe.lines().skip(2).take(2).collect();
        assert!(rows[0].starts_with("w/o HFE") && rows[0].contains("80.00") && rows[0].contains("90.69"));
        assert!(rows[1].starts_with("w/ HFE") && rows[1].contains("84.00") && rows[1].contains("91.27"));
        let fusion: Vec<&str> = text.split("Table ablation_fusion").nth(1).unwrap().lines().skip(2).take(2).collect();
        assert!(fusion[0].starts_with("addition") && fusion[0].contains("91.09"));
        assert!(fusion[1].starts_with("lerp") && fusion[1].contains("91.27"));
        assert!(text.contains("+4.00 here, +0.58 in the reference (same direction)"));
        assert!(text.contains("-1.00 here, +0.18 in the reference (opposite direction)"));
    }

    #[test]
    fn variants_differ_only_in_the_switch() {
        let base = RunConfig::from_preset("tiny").unwrap();
        let cfgs: Vec<RunConfig> = Variant::ALL.iter().map(|v| v.configure(&base)).collect();
        for c in &cfgs {
            assert_eq!(c.train, base.train);
            let mut m = c.model.clone();
            (m.use_hfe, m.fusion) = (base.model.use_hfe, base.model.fusion);
            assert_eq!(m, base.model);
        }
        assert!(!cfgs[0].model.use_hfe);
        assert_eq!(cfgs[1].model.fusion, FusionKind::Add);
        assert_eq!(cfgs[2].model, base.model);
    }
}
