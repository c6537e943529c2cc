//! Slice-folder ingestion contracts.

use std::fs;

use image::{ImageBuffer, Luma};
use rfhit::data::{ingest_slice_folder, synthetic_dataset, write_slice_folder, SyntheticSpec};

fn spec(volumes: usize, slices: usize) -> SyntheticSpec {
    SyntheticSpec { size: 16, volumes, slices_per_volume: slices, ..SyntheticSpec::default() }
}

#[test]
fn empty_folder_gives_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = ingest_slice_folder(dir.path(), 1, 4, [16, 16]).unwrap();
    assert!(ds.is_empty());
    assert!(ds.volumes.is_empty());
}

#[test]
fn one_pair_gives_one_sample_with_its_ids() {
    let dir = tempfile::tempdir().unwrap();
    let src = synthetic_dataset(&spec(1, 1)).unwrap();
    write_slice_folder(dir.path(), &src).unwrap();
    let ds = ingest_slice_folder(dir.path(), 1, 4, [16, 16]).unwrap();
    assert_eq!(ds.len(), 1);
    let s = &ds.samples[0];
    assert_eq!((s.volume_id.as_str(), s.slice_index), (src.samples[0].volume_id.as_str(), src.samples[0].slice_index));
    assert_eq!(s.label, src.samples[0].label);
}

#[test]
fn out_of_range_label_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_slice_folder(dir.path(), &synthetic_dataset(&spec(1, 2)).unwrap()).unwrap();
    let victim = fs::read_dir(dir.path().join("labels")).unwrap().next().unwrap().unwrap().path();
    let bad: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(16, 16, Luma([4]));
    bad.save(&victim).unwrap();
    let err = ingest_slice_folder(dir.path(), 1, 4, [16, 16]).unwrap_err().to_string();
    let name = victim.file_name().unwrap().to_string_lossy().into_owned();
    assert!(err.contains(&name), "{err}");
}

#[test]
fn unpaired_image_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_slice_folder(dir.path(), &synthetic_dataset(&spec(1, 2)).unwrap()).unwrap();
    let label = fs::read_dir(dir.path().join("labels")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(&label).unwrap();
    let err = ingest_slice_folder(dir.path(), 1, 4, [16, 16]).unwrap_err().to_string();
    assert!(err.contains("no matching label"), "{err}");
}
