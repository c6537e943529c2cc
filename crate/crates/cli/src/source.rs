//! Where slices come from: the built-in synthetic generator or a slice folder.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use rfhit::config::ModelConfig;
use rfhit::data::{ingest_slice_folder, synthetic_dataset, Dataset, SlicePrediction, SyntheticSpec};

/// Synthetic volumes per split; each volume has [`SYNTH_SLICES`] slices.
pub const SYNTH_TRAIN_VOLUMES: usize = 50;
pub const SYNTH_VAL_VOLUMES: usize = 10;
pub const SYNTH_TEST_VOLUMES: usize = 10;
pub const SYNTH_SLICES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Nested-ellipse phantoms generated on the fly.
    Synthetic,
    /// A slice folder (`images/`, `labels/`, optional `manifest.json`).
    Folder(PathBuf),
}

impl FromStr for DataSource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(if s == "synthetic" { Self::Synthetic } else { Self::Folder(PathBuf::from(s)) })
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::Folder(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Volume-disjoint partitions of the synthetic set. Folders are used whole.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Slice shape and channel counts the data must be delivered in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub size: [usize; 2],
    pub image_channels: usize,
    pub seg_channels: usize,
}

impl Geometry {
    pub fn of_model(model: &ModelConfig) -> Self {
        Self { size: model.input_size, image_channels: model.image_channels, seg_channels: model.seg_channels }
    }

    /// Matches existing predictions; images are read as one channel since only labels matter.
    pub fn of_predictions(preds: &[SlicePrediction]) -> Result<Self> {
        let p = preds.first().context("prediction folder contains no value rasters")?;
        Ok(Self { size: [p.h, p.w], image_channels: 1, seg_channels: p.classes })
    }
}

/// The synthetic generator matched to a geometry.
pub fn synthetic_spec(geo: Geometry, data_seed: u64) -> Result<SyntheticSpec> {
    let [h, w] = geo.size;
    if h != w {
        bail!("synthetic data is square; requested {h}x{w}");
    }
    if geo.image_channels != 1 {
        bail!("synthetic data has 1 image channel; {} requested", geo.image_channels);
    }
    Ok(SyntheticSpec {
        size: h,
        classes: geo.seg_channels,
        seed: data_seed,
        volumes: SYNTH_TRAIN_VOLUMES + SYNTH_VAL_VOLUMES + SYNTH_TEST_VOLUMES,
        slices_per_volume: SYNTH_SLICES,
        ..SyntheticSpec::default()
    })
}

/// Loads `split` of the source in the given geometry.
pub fn load(source: &DataSource, split: Split, geo: Geometry, data_seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synthetic => {
            let all = synthetic_dataset(&synthetic_spec(geo, data_seed)?)?;
            let (train, rest) = all.split_volumes(SYNTH_TRAIN_VOLUMES);
            let (val, test) = rest.split_volumes(SYNTH_VAL_VOLUMES);
            Ok(match split {
                Split::Train => train,
                Split::Val => val,
                Split::Test => test,
            })
        }
        DataSource::Folder(root) => {
            let ds = ingest_slice_folder(root, geo.image_channels, geo.seg_channels, geo.size)
                .with_context(|| format!("reading slice folder {}", root.display()))?;
            if ds.is_empty() {
                bail!("slice folder {} contains no image/label pairs", root.display());
            }
            Ok(ds)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rfhit::config::preset;

    #[test]
    fn synthetic_splits_are_volume_disjoint() {
        let geo = Geometry::of_model(&preset("tiny").unwrap());
        let parts: Vec<Dataset> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| load(&DataSource::Synthetic, s, geo, 0).unwrap())
            .collect();
        assert_eq!(parts[0].volumes.len(), SYNTH_TRAIN_VOLUMES);
        assert_eq!(parts[1].len(), SYNTH_VAL_VOLUMES * SYNTH_SLICES);
        for (i, a) in parts.iter().enumerate() {
            for b in &parts[i + 1..] {
                assert!(a.volumes.iter().all(|v| b.volumes.iter().all(|w| w.id != v.id)));
            }
        }
    }

    #[test]
    fn parses_source_names() {
        assert_eq!("synthetic".parse::<DataSource>().unwrap(), DataSource::Synthetic);
        assert_eq!("data/acdc".parse::<DataSource>().unwrap(), DataSource::Folder("data/acdc".into()));
    }
}
