use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cipherpatch::adapt::adapt_params;
use cipherpatch::blockcodec::{encrypt_image, EncryptionKeys, ImageTensor};
use cipherpatch::keyperm::gen_permutation;
use cipherpatch::vit::{
    embed, encoder_forward, forward, init_params, loss_and_grads, sgd_step, Matrix, SgdConfig,
    SgdState, ViTConfig, ViTParams,
};

fn small_cfg() -> ViTConfig {
    ViTConfig {
        image_h: 8,
        image_w: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        layers: 2,
        mlp_dim: 32,
        classes: 4,
    }
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &ViTConfig) -> ImageTensor {
    let n = cfg.image_h * cfg.image_w * cfg.channels;
    ImageTensor::new(
        cfg.image_h,
        cfg.image_w,
        cfg.channels,
        (0..n).map(|_| rng.random()).collect(),
    )
    .unwrap()
}

/// Max abs difference relative to the larger magnitude, floored at `floor`.
fn max_rel_floor(a: &[f32], b: &[f32], floor: f32) -> f32 {
    let scale = a.iter().chain(b).fold(floor, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn max_rel(a: &[f32], b: &[f32]) -> f32 {
    max_rel_floor(a, b, 0.0)
}

fn keys_strategy(p: usize) -> impl Strategy<Value = EncryptionKeys> {
    (any::<u64>(), any::<u64>(), 0..4u8).prop_map(move |(k1, k2, mode)| match mode {
        0 => EncryptionKeys::block_only(k1, p),
        1 => EncryptionKeys::pixel_only(k2, p),
        _ => EncryptionKeys::new(k1, k2, p),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adapted_model_matches_source_on_encrypted_input(keys in keys_strategy(4), seed in any::<u64>()) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = init_params(&cfg, seed).unwrap();
        let adapted = adapt_params(&source, &keys, &cfg).unwrap();
        let x = random_image(&mut rng, &cfg);
        let plain = forward(&x, &source, &cfg).unwrap();
        let enc = forward(&encrypt_image(&x, &keys).unwrap(), &adapted, &cfg).unwrap();
        for (a, b) in plain.iter().zip(&enc) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn adapted_embedding_is_block_permuted_plain_embedding(keys in keys_strategy(4), seed in any::<u64>()) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = init_params(&cfg, seed).unwrap();
        let adapted = adapt_params(&source, &keys, &cfg).unwrap();
        let x = random_image(&mut rng, &cfg);
        let z = embed(&x, &source, &cfg).unwrap();
        let z_hat = embed(&encrypt_image(&x, &keys).unwrap(), &adapted, &cfg).unwrap();
        let perm = keys.block_permutation(cfg.n_patches()).unwrap().extend_for_class_token();
        let expected = perm.apply_flat_rows(&z.data, z.cols).unwrap();
        prop_assert!(max_rel(&z_hat.data, &expected) <= 1e-6);
        prop_assert_eq!(z_hat.row(0), z.row(0));
    }

    #[test]
    fn encoder_commutes_with_token_permutation(perm_key in any::<u64>(), seed in any::<u64>()) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, seed).unwrap();
        let n = cfg.seq_len();
        let z = Matrix::from_vec(n, cfg.embed_dim, (0..n * cfg.embed_dim).map(|_| rng.random::<f32>() - 0.5).collect());
        let perm = gen_permutation(perm_key, n).unwrap();
        let permuted = Matrix::from_vec(n, z.cols, perm.apply_flat_rows(&z.data, z.cols).unwrap());
        let lhs = encoder_forward(&permuted, &params, &cfg).unwrap();
        let out = encoder_forward(&z, &params, &cfg).unwrap();
        let rhs = perm.apply_flat_rows(&out.data, out.cols).unwrap();
        prop_assert!(max_rel(&lhs.data, &rhs) <= 1e-5);
    }

    #[test]
    fn sgd_steps_commute_with_adaptation(keys in keys_strategy(4), seed in any::<u64>()) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source = init_params(&cfg, seed).unwrap();
        let mut adapted = adapt_params(&source, &keys, &cfg).unwrap();
        let sgd = SgdConfig { lr: 0.05, ..SgdConfig::default() };
        let (mut s_state, mut a_state) = (SgdState::new(), SgdState::new());
        for _ in 0..3 {
            let x = random_image(&mut rng, &cfg);
            let y = rng.random_range(0..cfg.classes);
            let enc = encrypt_image(&x, &keys).unwrap();
            let gs = loss_and_grads(&[(&x, y)], &source, &cfg).unwrap();
            let ga = loss_and_grads(&[(&enc, y)], &adapted, &cfg).unwrap();
            prop_assert!((gs.loss - ga.loss).abs() <= 1e-5);
            sgd_step(&mut source, &gs.grads, &sgd, &mut s_state);
            sgd_step(&mut adapted, &ga.grads, &sgd, &mut a_state);
        }
        let expected: ViTParams<f32> = adapt_params(&source, &keys, &cfg).unwrap();
        for (a, b) in adapted.tensors().iter().zip(expected.tensors()) {
            // the key bias has an identically zero gradient and only carries noise
            prop_assert!(max_rel_floor(a.data, b.data, 1e-6) <= 1e-3, "tensor {}", a.name);
        }
    }
}
