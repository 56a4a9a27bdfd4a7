mod common;

use common::gradcheck::{suite, TOLERANCE};
use kgc_core::model::Variant;

fn assert_close(name: &str, err: f64) {
    assert!(err < TOLERANCE, "{name}: max relative error {err:e}");
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in suite::ops() {
        assert_close(name, err);
    }
}

#[test]
fn encoder_matches_finite_differences() {
    assert_close("encoder", suite::encoder());
}

#[test]
fn decoders_match_finite_differences() {
    for v in [Variant::GcnConvTransE, Variant::DistMult, Variant::ComplEx] {
        assert_close(v.name(), suite::decoder(v));
    }
}

#[test]
fn training_objective_matches_finite_differences() {
    for v in [Variant::SimGcnConvTransE, Variant::ConvTransE, Variant::DistMult, Variant::ComplEx] {
        assert_close(v.name(), suite::training_objective(v));
    }
}
