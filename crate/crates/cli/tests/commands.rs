//! End-to-end behaviour of the command implementations and the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use rfhit::checkpoint::Checkpoint;
use rfhit::config::preset;
use rfhit::data::{one_hot, write_predictions, SlicePrediction};
use rfhit_cli::source::{self, DataSource, Geometry, Split};
use rfhit_cli::{calibrate, eval, report, sample, synth, train, Cli, Command, ThresholdsFile};

fn parse(args: &[&str]) -> Command {
    let mut full = vec!["rfhit"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).unwrap().command
}

fn run_train(args: &[&str], root: &Path) -> rfhit_cli::TrainOutcome {
    match parse(args) {
        Command::Train(a) => train(&a, root, &mut Vec::new()).unwrap(),
        _ => unreachable!(),
    }
}

/// Tiny model trained for a few small-batch steps.
fn quick_checkpoint(dir: &Path) -> PathBuf {
    let out = dir.join("run");
    let out = out.to_str().unwrap();
    run_train(&["train", "--preset", "tiny", "--steps", "3", "--batch-size", "2", "--out", out], dir).checkpoint
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn train_writes_checkpoint_and_log_then_resumes_to_the_same_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &str| d.join(p).to_string_lossy().into_owned();
    let full = run_train(&["train", "--steps", "4", "--batch-size", "2", "--out", &s("full")], d);
    assert_eq!(full.step, 4);
    assert!(full.checkpoint.exists());
    assert_eq!(fs::read_to_string(d.join("full/train_log.txt")).unwrap().lines().count(), 4);
    assert!(d.join("full/config.toml").exists());

    let part = run_train(&["train", "--steps", "4", "--batch-size", "2", "--stop-after", "2", "--out", &s("part")], d);
    assert_eq!(part.step, 2);
    let ck = s("part/checkpoint.bin");
    let resumed = run_train(&["train", "--resume", &ck, "--out", &s("part")], d);
    assert_eq!(resumed.step, 4);
    assert_eq!(&part.losses[..], &full.losses[..2]);
    assert_eq!(&resumed.losses[..], &full.losses[2..]);
    let a = Checkpoint::load(&full.checkpoint).unwrap();
    let b = Checkpoint::load(&resumed.checkpoint).unwrap();
    for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
        assert_eq!(x.value, y.value, "{}", x.name);
    }
}

#[test]
fn sampling_is_deterministic_and_calibration_reports_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ck = quick_checkpoint(d);
    let ck = ck.to_str().unwrap();
    let s = |p: &str| d.join(p).to_string_lossy().into_owned();
    for (name, n) in [("a", "3"), ("b", "3"), ("one", "1")] {
        let Command::Sample(a) = parse(&["sample", "--checkpoint", ck, "--split", "val", "-n", n, "--out", &s(name)])
        else {
            unreachable!()
        };
        sample(&a, d, &mut Vec::new()).unwrap();
    }
    let a = files(&d.join("a/values"));
    assert_eq!(a.len(), 100 * 4);
    assert_eq!(a, files(&d.join("b/values")));
    assert_ne!(a, files(&d.join("one/values")));

    let mut texts = Vec::new();
    for name in ["t1.json", "t2.json"] {
        let Command::Calibrate(c) = parse(&["calibrate", "--checkpoint", ck, "--out", &s(name)]) else {
            unreachable!()
        };
        let mut text = Vec::new();
        let file = calibrate(&c, d, &mut text).unwrap();
        assert_eq!(file.thresholds.len(), 4);
        texts.push(String::from_utf8(text).unwrap());
    }
    assert!(texts[0].contains("100 values from 0.2000 to 0.8000"), "{}", texts[0]);
    assert_eq!(texts[0].replace("t1.json", "t2.json"), texts[1]);
    let back = ThresholdsFile::load(&d.join("t1.json")).unwrap();
    assert_eq!(back, ThresholdsFile::load(&d.join("t2.json")).unwrap());
    assert_eq!(back.thresholds.len(), 4);

    // calibrating from the written predictions uses the same code path
    let Command::Calibrate(c) = parse(&["calibrate", "--predictions", &s("a"), "--out", &s("t3.json")]) else {
        unreachable!()
    };
    assert_eq!(calibrate(&c, d, &mut Vec::new()).unwrap().thresholds.len(), 4);
}

/// Ground-truth one-hot masks written as predictions.
fn perfect_predictions(root: &Path, drop_volume: Option<&str>) {
    let geo = Geometry::of_model(&preset("tiny").unwrap());
    let ds = source::load(&DataSource::Synthetic, Split::Test, geo, 0).unwrap();
    let preds: Vec<SlicePrediction> = ds
        .samples
        .iter()
        .filter(|s| Some(s.volume_id.as_str()) != drop_volume)
        .map(|s| SlicePrediction {
            volume_id: s.volume_id.clone(),
            slice_index: s.slice_index,
            classes: 4,
            h: s.label.h,
            w: s.label.w,
            values: one_hot::<f32>(&s.label, 4).unwrap().data().to_vec(),
        })
        .collect();
    let mut manifest = ds.manifest();
    manifest.volumes.retain(|v| Some(v.id.as_str()) != drop_volume);
    write_predictions(root, &preds, &manifest).unwrap();
}

#[test]
fn eval_scores_perfect_predictions_and_names_missing_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let th = d.join("t.json");
    ThresholdsFile { grid: Default::default(), thresholds: vec![0.5; 4] }.save(&th).unwrap();
    perfect_predictions(&d.join("perfect"), None);
    let args = |p: &str| {
        let Command::Eval(e) = parse(&[
            "eval",
            "--predictions",
            d.join(p).to_str().unwrap(),
            "--truth",
            "synthetic",
            "--thresholds",
            th.to_str().unwrap(),
        ]) else {
            unreachable!()
        };
        e
    };
    let mut text = Vec::new();
    let r = eval(&args("perfect"), &mut text).unwrap();
    assert!(r.dice.iter().all(|&x| x == 1.0));
    assert!(r.hd95.iter().all(|&x| x == Some(0.0)));
    let text = String::from_utf8(text).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Metric", "RV", "Myo", "LV", "Avg."]);

    let geo = Geometry::of_model(&preset("tiny").unwrap());
    let missing = source::load(&DataSource::Synthetic, Split::Test, geo, 0).unwrap().volumes[3].id.clone();
    perfect_predictions(&d.join("partial"), Some(&missing));
    let err = eval(&args("partial"), &mut Vec::new()).unwrap_err();
    assert!(format!("{err:#}").contains(&missing), "{err:#}");
}

#[test]
fn report_json_parses_and_reference_is_only_for_the_full_preset() {
    let Command::Report(a) = parse(&["report", "--preset", "tiny", "--json"]) else { unreachable!() };
    let mut out = Vec::new();
    report(&a, &mut out).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["reference_compared"], false);
    assert!(v["report"]["total_params"].as_u64().unwrap() > 0);

    let Command::Report(a) = parse(&["report", "--preset", "tiny"]) else { unreachable!() };
    let mut out = Vec::new();
    report(&a, &mut out).unwrap();
    assert!(!String::from_utf8(out).unwrap().contains("reference"));
    let Command::Report(a) = parse(&["report", "--preset", "paper"]) else { unreachable!() };
    let mut out = Vec::new();
    report(&a, &mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().contains("reference: 13.6M params, 10.14 GFLOPs"));
}

#[test]
fn synthetic_folder_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let Command::Synth(a) = parse(&["synth", "--out", out.to_str().unwrap(), "--volumes", "2", "--slices", "3"]) else {
        unreachable!()
    };
    synth(&a, &mut Vec::new()).unwrap();
    let geo = Geometry::of_model(&preset("tiny").unwrap());
    let ds = source::load(&DataSource::Folder(out), Split::Train, geo, 0).unwrap();
    assert_eq!((ds.len(), ds.volumes.len()), (6, 2));
}

#[test]
fn binary_exit_codes_follow_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_rfhit");
    let ok = Process::new(bin).args(["report", "--preset", "unit"]).output().unwrap();
    assert!(ok.status.success());
    let bad = Process::new(bin).args(["train", "--preset", "huge"]).env("RFHIT_OUT", dir.path()).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown preset `huge`"));
    let missing = Process::new(bin).args(["sample", "--checkpoint", "nowhere.bin"]).output().unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere.bin"));
}
