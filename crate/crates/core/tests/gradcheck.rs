//! Central finite differences against the backward pass, in double precision.

use rfhit::gradcheck::{ada_rms_norm_suite, end_to_end_suite, neighborhood_attention_suite, GradReport};

const TOLERANCE: f64 = 1e-3;

fn assert_close(r: &GradReport, min_checked: usize) {
    assert!(r.checked >= min_checked, "only {} coordinates probed", r.checked);
    assert!(r.worst < TOLERANCE, "worst relative error {:e} at {}", r.worst, r.worst_at);
}

#[test]
fn ada_rms_norm() {
    let r = ada_rms_norm_suite().unwrap();
    assert_eq!(r.tensors, ["norm.weight", "input0", "input1"]);
    assert_close(&r, 18);
}

#[test]
fn neighborhood_attention_kernel_3() {
    let r = neighborhood_attention_suite().unwrap();
    assert_close(&r, 24);
}

#[test]
fn skip_and_fusion_mixing_coefficients() {
    for prefix in ["hfm.skip", "hfe.fuse"] {
        let r = end_to_end_suite(|n| n.starts_with(prefix)).unwrap();
        assert_eq!(r.tensors.iter().filter(|t| t.starts_with(prefix)).count(), 2, "{prefix}");
        assert_close(&r, 2);
    }
}

#[test]
fn every_parameter_of_every_submodule() {
    let r = end_to_end_suite(|_| true).unwrap();
    for module in ["hfm.patchify", "hfm.mapping", "hfm.enc0", "hfm.merge0", "hfm.mid", "hfm.split0", "hfm.dec0", "hfm.head", "hfe.level0", "hfe.proj0"] {
        assert!(r.tensors.iter().any(|t| t.starts_with(module)), "{module} not probed");
    }
    assert_close(&r, 100);
}
