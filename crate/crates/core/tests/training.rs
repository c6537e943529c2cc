//! Trainer behaviour on the `tiny` preset: gradient coverage, progress and
//! resume equivalence.

use rfhit::config::{preset, RunConfig};
use rfhit::data::{synthetic_dataset, Dataset, SyntheticSpec};
use rfhit::trainer::Trainer;

fn data(volumes: usize) -> Dataset {
    synthetic_dataset(&SyntheticSpec { volumes, ..SyntheticSpec::default() }).unwrap()
}

fn trainer(seed: u64, batch_size: usize, steps: usize) -> Trainer {
    let mut rc = RunConfig::from_preset("tiny").unwrap();
    rc.train.seed = seed;
    rc.train.batch_size = batch_size;
    rc.train.steps = Some(steps);
    Trainer::new(&rc.model, &rc.train, steps).unwrap()
}

#[test]
fn every_parameter_gets_a_gradient_and_the_lerp_coefficients_are_live() {
    let ds = data(4);
    let mut tr = trainer(0, 2, 10);
    let n = tr.model.store.len();
    let mut touched = vec![false; n];
    let mut last = Vec::new();
    for _ in 0..3 {
        let (_, grads) = tr.peek_gradients(&ds).unwrap();
        for (hit, g) in touched.iter_mut().zip(&grads) {
            *hit |= g.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        }
        last = grads;
        tr.train_step(&ds).unwrap();
    }
    let dead: Vec<&str> =
        tr.model.store.entries().iter().zip(&touched).filter(|(_, &t)| !t).map(|(e, _)| e.name.as_str()).collect();
    assert!(dead.is_empty(), "never received a gradient: {dead:?}");

    // once the head is nonzero, every skip and fusion coefficient moves on each batch
    let alphas: Vec<usize> =
        (0..n).filter(|&i| tr.model.store.entries()[i].name.ends_with("alpha")).collect();
    let levels = preset("tiny").unwrap().widths.len();
    assert!(alphas.len() >= 2 * (levels - 1), "{} coefficients", alphas.len());
    for i in alphas {
        let g = last[i].as_ref().map_or(0.0, |g| g.data()[0]);
        assert!(g != 0.0, "{} has zero gradient", tr.model.store.entries()[i].name);
    }
}

#[test]
fn loss_falls_over_500_steps_for_the_median_seed() {
    let ds = data(20);
    assert_eq!(ds.len(), 200);
    let mut gaps: Vec<f64> = (0..3)
        .map(|seed| {
            let mut tr = trainer(seed, 2, 500);
            let mut losses = Vec::new();
            tr.fit(&ds, |s| {
                losses.push(s.loss);
                Ok(())
            })
            .unwrap();
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
            mean(&losses[450..]) - mean(&losses[..50])
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    assert!(gaps[1] < 0.0, "last-50 minus first-50 mean loss per seed: {gaps:?}");
}

#[test]
fn resuming_at_step_100_matches_the_uninterrupted_run() {
    let ds = data(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut a = trainer(7, 2, 110);
    for _ in 0..100 {
        a.train_step(&ds).unwrap();
    }
    rfhit::checkpoint::Checkpoint::from_trainer(&a, &RunConfig::from_preset("tiny").unwrap()).save(&path).unwrap();
    let mut b = rfhit::checkpoint::Checkpoint::load(&path).unwrap().trainer().unwrap();
    assert_eq!(b.step, 100);
    for _ in 0..10 {
        let (x, y) = (a.train_step(&ds).unwrap(), b.train_step(&ds).unwrap());
        assert_eq!(x.step, y.step);
        assert!((x.loss - y.loss).abs() <= 1e-6, "step {}: {} vs {}", x.step, x.loss, y.loss);
    }
}
