mod support;

use cohesion_core::heads::HeadKind;
use support::*;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in primitive_cases() {
        let err = check_case(&case);
        if err.is_nan() || err >= TOLERANCE {
            failures.push(format!("{}: {err:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn capsnet_loss_gradient() {
    let w = check_capsnet_loss();
    assert!(w.error < TOLERANCE, "{w:?}");
}

#[test]
fn face_head_gradient() {
    let w = check_face_head();
    assert!(w.error < TOLERANCE, "{w:?}");
}

#[test]
fn image_head_gradient() {
    let w = check_image_model(&desk_feature_config(HeadKind::Cohesion));
    assert!(w.error < TOLERANCE, "{w:?}");
}

#[test]
fn multitask_head_gradient() {
    let w = check_image_model(&desk_feature_config(HeadKind::MultiTask));
    assert!(w.error < TOLERANCE, "{w:?}");
}

#[test]
fn convolutional_backbone_gradient() {
    for kind in [HeadKind::Cohesion, HeadKind::Emotion, HeadKind::MultiTask] {
        let w = check_image_model(&tiny_conv_config(kind));
        assert!(w.error < TOLERANCE, "{kind:?}: {w:?}");
    }
}
