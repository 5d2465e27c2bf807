use xmodal_core::encoder::{EncoderConfig, FrozenBackbone, PromptPool};
use xmodal_core::{Backbone32, Mat, Rng, TaskId};

#[test]
fn open_prompts_move_features_and_pools_differ() {
    let enc = EncoderConfig::default();
    let b = FrozenBackbone::<f64>::new(&enc).unwrap();
    let mut rng = Rng::seed(7);
    let p1 = PromptPool::random(TaskId(0), &enc, 0.5, &mut rng);
    let p2 = PromptPool::random(TaskId(1), &enc, 0.5, &mut rng);
    let x = Mat::random_normal(enc.image_tokens, enc.patch_dim, 1.0, &mut rng);
    let tokens = [3u32, 9, 27, 81, 243, 5];
    let open_i = vec![1.0; enc.image_layers];
    let open_t = vec![1.0; enc.text_layers];
    let frozen = b.frozen_image(&x).unwrap();
    assert!(frozen.norm() > 0.0 && frozen.is_finite() && frozen.dim() == enc.embed_dim);
    assert_ne!(b.encode_image(&x, Some(&p1), &open_i).unwrap(), frozen);
    assert_eq!(
        b.encode_image(&x, Some(&p1), &vec![0.0; enc.image_layers])
            .unwrap(),
        frozen
    );
    let e1 = b.encode_text(&tokens, Some(&p1), &open_t).unwrap();
    let e2 = b.encode_text(&tokens, Some(&p2), &open_t).unwrap();
    assert_ne!(e1, e2);
    assert_eq!(
        b.encode_text(&tokens, Some(&p2), &vec![0.0; enc.text_layers])
            .unwrap(),
        b.frozen_text(&tokens).unwrap()
    );
}

#[test]
fn single_precision_backbone_tracks_double() {
    let enc = EncoderConfig::default();
    let b64 = FrozenBackbone::<f64>::new(&enc).unwrap();
    let b32 = Backbone32::new(&enc).unwrap();
    let mut rng = Rng::seed(1);
    let x: Mat<f64> = Mat::random_normal(enc.image_tokens, enc.patch_dim, 1.0, &mut rng);
    let v64 = b64.frozen_image(&x).unwrap();
    let v32 = b32.frozen_image(&x.cast::<f32>()).unwrap();
    for (a, b) in v64.0.iter().zip(&v32.0) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
    assert_eq!(b64.frozen_weight_count(), b32.frozen_weight_count());
}
