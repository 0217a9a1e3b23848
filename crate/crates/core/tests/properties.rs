use cohesion_core::capsnet::EmotionDistribution;
use cohesion_core::data::{
    gcs_from_emotions, group_emotion_from_faces, preprocess_face, synth_generate, SynthSpec, NUM_EMOTIONS,
};
use cohesion_core::heads::{
    pool_face_emotions, Backbone, FaceHead, FaceHeadConfig, HeadKind, ImageModel, ImageModelConfig, ImageSample,
    PooledEmotionFeature,
};
use cohesion_core::training::kfold_split;
use cohesion_core::Error;
use proptest::prelude::*;

fn distribution() -> impl Strategy<Value = EmotionDistribution> {
    prop::array::uniform7(0.0f64..1.0).prop_map(|raw| EmotionDistribution::from_lengths(&raw))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pooling_ignores_face_order(
        (faces, order) in prop::collection::vec(distribution(), 1..12)
            .prop_flat_map(|f| {
                let n = f.len();
                (Just(f), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
            })
    ) {
        let shuffled: Vec<EmotionDistribution> = order.iter().map(|&i| faces[i]).collect();
        let a = pool_face_emotions(&faces).unwrap();
        let b = pool_face_emotions(&shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pooled_rows_are_ordered(faces in prop::collection::vec(distribution(), 1..12)) {
        let p = pool_face_emotions(&faces).unwrap();
        for k in 0..NUM_EMOTIONS {
            prop_assert!(p.minimum()[k] <= p.average()[k]);
            prop_assert!(p.average()[k] <= p.maximum()[k]);
            prop_assert!((0.0..=1.0).contains(&p.minimum()[k]));
            prop_assert!((0.0..=1.0).contains(&p.maximum()[k]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kfold_is_a_balanced_partition(n in 2usize..400, k in 2usize..12, seed: u64) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        let mut seen = vec![false; n];
        for f in 0..k {
            for i in folds.fold(f) {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        let sizes = folds.sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(folds, kfold_split(n, k, seed).unwrap());
    }

    #[test]
    fn face_head_output_stays_on_label_scale(
        rows in prop::array::uniform3(prop::array::uniform7(-1e6f64..1e6)),
        seed in 0u64..8,
    ) {
        let head = FaceHead::<f64>::new(FaceHeadConfig::default(), seed).unwrap();
        let score = head.predict(&PooledEmotionFeature { rows }).unwrap();
        prop_assert!((0.0..=3.0).contains(&score.value()));
    }

    #[test]
    fn image_head_outputs_stay_in_range(
        feature in prop::collection::vec(-1e3f64..1e3, 16),
        kind in prop_oneof![Just(HeadKind::Cohesion), Just(HeadKind::Emotion), Just(HeadKind::MultiTask)],
    ) {
        let config = ImageModelConfig {
            backbone: Backbone::Features { width: 16 },
            trunk: vec![8, 8, 8],
            ..ImageModelConfig::desk(kind)
        };
        let model = ImageModel::<f64>::new(config, 1).unwrap();
        let sample = ImageSample { input: feature, gcs: 0.0, emotion: cohesion_core::data::GroupEmotion::Neutral };
        let p = &model.predict_batch(&[&sample]).unwrap()[0];
        prop_assert_eq!(p.gcs.is_some(), kind != HeadKind::Emotion);
        if let Some(g) = p.gcs {
            prop_assert!((0.0..=3.0).contains(&g));
        }
        if let Some(e) = p.emotion {
            prop_assert!(e.iter().all(|&x| x >= 0.0));
            prop_assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn pooling_refuses_empty_face_list() {
    assert!(matches!(pool_face_emotions(&[]), Err(Error::NoFaces)));
}

#[test]
fn kfold_remainder_goes_to_leading_folds() {
    let mut sizes = kfold_split(102, 5, 9).unwrap().sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, vec![21, 21, 20, 20, 20]);
    assert_eq!(kfold_split(100, 5, 9).unwrap().sizes(), vec![20; 5]);
    assert!(kfold_split(3, 5, 0).is_err());
}

#[test]
fn synthetic_labels_follow_drawn_emotions() {
    let spec = SynthSpec {
        num_samples: 300,
        seed: 21,
        ..SynthSpec::default()
    };
    let samples = synth_generate(&spec).unwrap();
    assert_eq!(samples, synth_generate(&spec).unwrap());
    for s in &samples {
        let emotions = s.face_emotions.as_ref().unwrap();
        assert_eq!(emotions.len(), s.faces.len());
        assert!((spec.faces_min..=spec.faces_max).contains(&emotions.len()));
        assert_eq!(Some(s.gcs), gcs_from_emotions(emotions));
        assert_eq!(Some(s.emotion), group_emotion_from_faces(emotions));
        assert!((0.0..=3.0).contains(&s.gcs));
        for i in 0..s.faces.len() {
            let crop = preprocess_face(s, i, 28).unwrap();
            assert_eq!(crop.len(), 28 * 28);
            assert!(crop.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn different_seeds_give_different_data() {
    let a = synth_generate(&SynthSpec { num_samples: 5, seed: 1, ..SynthSpec::default() }).unwrap();
    let b = synth_generate(&SynthSpec { num_samples: 5, seed: 2, ..SynthSpec::default() }).unwrap();
    assert_ne!(a, b);
}
