//! End-to-end inference: sample every slice of a dataset, stack volumes,
//! calibrate thresholds and score.

use crate::config::ThresholdGrid;
use crate::data::{collate, derived_rng, id_tag, predictions_from_batch, Dataset, SlicePrediction, SliceSample};
use crate::error::Result;
use crate::metrics::{calibrate_thresholds, evaluate, stack_labels, stack_slices, EvalReport, SegVolume};
use crate::model::RfHit;
use crate::tensor::Tensor;

/// Slices sampled per model call.
pub const PREDICT_BATCH: usize = 32;

/// Euler-samples every slice. Each slice's starting noise depends only on
/// `(seed, volume, slice)`, so batching does not change the output.
pub fn predict(model: &RfHit<f32>, data: &Dataset, steps: usize, seed: u64) -> Result<Vec<SlicePrediction>> {
    let classes = model.config.seg_channels;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(PREDICT_BATCH) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let (image, _) = collate::<f32>(&refs, classes)?;
        let (_, _, h, w) = image.dims4()?;
        let noise = refs
            .iter()
            .map(|s| {
                let mut rng = derived_rng(seed, &[id_tag(&s.volume_id), s.slice_index as u64]);
                Tensor::<f32>::randn(&[1, classes, h, w], &mut rng)
            })
            .collect::<Vec<_>>();
        let x0 = Tensor::stack_batch(&noise)?;
        let x1 = model.sample(&image, &x0, steps)?;
        out.extend(predictions_from_batch(&x1, &refs)?);
    }
    Ok(out)
}

/// Predicted and ground-truth volumes for a dataset.
pub fn predict_volumes(
    model: &RfHit<f32>,
    data: &Dataset,
    steps: usize,
    seed: u64,
) -> Result<(Vec<SegVolume>, Vec<SegVolume>)> {
    let manifest = data.manifest();
    let preds = stack_slices(&predict(model, data, steps, seed)?, &manifest)?;
    let gts = stack_labels(&data.samples, &manifest, model.config.seg_channels)?;
    Ok((preds, gts))
}

/// Result of calibrating on one split and scoring another.
#[derive(Clone, Debug)]
pub struct Assessment {
    pub thresholds: Vec<f64>,
    pub report: EvalReport,
}

/// Calibrates thresholds on `val` and evaluates on `test`, both with `steps` Euler steps.
pub fn assess(
    model: &RfHit<f32>,
    val: &Dataset,
    test: &Dataset,
    steps: usize,
    seed: u64,
    grid: &ThresholdGrid,
) -> Result<Assessment> {
    let (vp, vg) = predict_volumes(model, val, steps, seed)?;
    let thresholds = calibrate_thresholds(&vp, &vg, grid)?;
    let (tp, tg) = predict_volumes(model, test, steps, seed)?;
    let report = evaluate(&tp, &tg, &thresholds)?;
    Ok(Assessment { thresholds, report })
}
