use medusa::model::{
    checkpoint, load_checkpoint, save_checkpoint, MedusaVariant, Model, ModelConfig, ModelError,
    BOS, EOS,
};
use medusa::numerics::{kernels, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: MedusaVariant, k: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_attn_heads: 4,
        d_ff: 24,
        d_feat: 6,
        max_src_frames: 90,
        max_tgt_tokens: 30,
        k,
        variant,
        frames_per_token: 3,
        seed,
    }
}

fn features(frames: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(
        frames,
        d,
        (0..frames * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn tokens(n: usize, v: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = vec![BOS];
    t.extend((1..n).map(|_| rng.random_range(3..v)));
    t
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::new(small(MedusaVariant::MedusaLinear, 2, 7)).unwrap();
    let b = Model::new(small(MedusaVariant::MedusaLinear, 2, 7)).unwrap();
    assert_eq!(a, b);
    let c = Model::new(small(MedusaVariant::MedusaLinear, 2, 8)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn encode_shapes_and_errors() {
    let m = Model::new(small(MedusaVariant::None, 0, 1)).unwrap();
    let z = m.encode(&features(12, 6, 2)).unwrap();
    assert_eq!(z.z.shape(), &[12, 16]);
    assert_eq!(z, m.encode(&features(12, 6, 2)).unwrap());
    assert!(matches!(
        m.encode(&features(91, 6, 2)),
        Err(ModelError::Length { .. })
    ));
    assert!(m.encode(&features(4, 5, 2)).is_err());
}

#[test]
fn cached_decoding_matches_full_recompute() {
    let m = Model::new(small(MedusaVariant::None, 0, 3)).unwrap();
    let z = m.encode(&features(60, 6, 4)).unwrap();
    let toks = tokens(20, 16, 5);
    let full = m.decoder_hidden(&toks, &z, None).unwrap();
    let mut cache = m.new_cache(&z).unwrap();
    let mut rows = Vec::new();
    for chunk in [&toks[..1], &toks[1..7], &toks[7..8], &toks[8..]] {
        let h = m.decoder_hidden(chunk, &z, Some(&mut cache)).unwrap();
        rows.extend_from_slice(h.data());
    }
    assert_eq!(cache.len(), 20);
    let max = full
        .data()
        .iter()
        .zip(&rows)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max < 1e-9, "max difference {max}");
}

#[test]
fn truncated_cache_replays_identically() {
    let m = Model::new(small(MedusaVariant::None, 0, 3)).unwrap();
    let z = m.encode(&features(30, 6, 4)).unwrap();
    let toks = tokens(12, 16, 6);
    let mut cache = m.new_cache(&z).unwrap();
    m.decoder_hidden(&toks, &z, Some(&mut cache)).unwrap();
    cache.truncate(5);
    let h = m.decoder_hidden(&toks[5..], &z, Some(&mut cache)).unwrap();
    let full = m.decoder_hidden(&toks, &z, None).unwrap();
    assert_eq!(h.data(), &full.data()[5 * 16..]);
    let mut fresh = m.new_cache(&z).unwrap();
    m.decoder_hidden(&toks, &z, Some(&mut fresh)).unwrap();
    assert_eq!(cache, fresh);
}

#[test]
fn decoder_is_causal() {
    let m = Model::new(small(MedusaVariant::None, 0, 9)).unwrap();
    let z = m.encode(&features(30, 6, 1)).unwrap();
    let a = tokens(10, 16, 1);
    let mut b = a.clone();
    for t in b.iter_mut().skip(6) {
        *t = 3 + (*t + 5) % 13;
    }
    let ha = m.decoder_hidden(&a, &z, None).unwrap();
    let hb = m.decoder_hidden(&b, &z, None).unwrap();
    assert_eq!(&ha.data()[..6 * 16], &hb.data()[..6 * 16]);
    assert_ne!(&ha.data()[6 * 16..], &hb.data()[6 * 16..]);
    assert_eq!(
        m.decoder_hidden(&[BOS], &z, None).unwrap().shape(),
        &[1, 16]
    );
}

#[test]
fn decoder_capacity_is_enforced() {
    let m = Model::new(small(MedusaVariant::None, 0, 9)).unwrap();
    let z = m.encode(&features(30, 6, 1)).unwrap();
    assert!(m.decoder_hidden(&tokens(31, 16, 2), &z, None).is_ok());
    assert!(matches!(
        m.decoder_hidden(&tokens(32, 16, 2), &z, None),
        Err(ModelError::Length { .. })
    ));
}

#[test]
fn zero_initialized_heads_copy_the_base_row() {
    for variant in [MedusaVariant::MedusaLinear, MedusaVariant::MedusaBlock] {
        let m = Model::new(small(variant, 3, 2)).unwrap();
        let z = m.encode(&features(9, 6, 3)).unwrap();
        let h = m.decoder_hidden(&[BOS, 5], &z, None).unwrap();
        let d = m.medusa_forward(h.row(1), &z).unwrap();
        assert_eq!(d.rows(), 4);
        if variant == MedusaVariant::MedusaLinear {
            for k in 1..4 {
                assert_eq!(d.row(k), d.row(0));
            }
        } else {
            for k in 2..4 {
                assert_eq!(d.row(k), d.row(1));
            }
        }
        for k in 0..4 {
            let s: f64 = d.probs(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn base_only_model_has_one_row() {
    let m = Model::new(small(MedusaVariant::None, 0, 2)).unwrap();
    let z = m.encode(&features(9, 6, 3)).unwrap();
    let h = m.decoder_hidden(&[BOS], &z, None).unwrap();
    let d = m.medusa_forward(h.row(0), &z).unwrap();
    assert_eq!(d.rows(), 1);
    assert_eq!(d.row(0), m.base_logits(&h).unwrap().row(0));
}

#[test]
fn perturbing_one_head_changes_only_its_row() {
    let mut m = Model::new(small(MedusaVariant::MedusaLinear, 3, 2)).unwrap();
    let z = m.encode(&features(9, 6, 3)).unwrap();
    let h = m.decoder_hidden(&[BOS, 4, 7], &z, None).unwrap();
    let before = m.medusa_forward(h.row(2), &z).unwrap();
    m.params_mut()
        .get_mut("medusa.heads.2.weight")
        .unwrap()
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, w)| *w = (i as f64 * 0.37).sin() * 0.3);
    let after = m.medusa_forward(h.row(2), &z).unwrap();
    for k in 0..4 {
        assert_eq!(before.row(k) == after.row(k), k != 2, "row {k}");
    }
    m.params_mut()
        .get_mut("medusa.proj.bias")
        .unwrap()
        .data_mut()[EOS] += 1.0;
    let shared = m.medusa_forward(h.row(2), &z).unwrap();
    assert_eq!(shared.row(0), after.row(0));
    for k in 1..4 {
        assert_ne!(shared.row(k), after.row(k));
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [
        MedusaVariant::None,
        MedusaVariant::MedusaLinear,
        MedusaVariant::MedusaBlock,
    ] {
        let k = if variant == MedusaVariant::None { 0 } else { 2 };
        let m = Model::new(small(variant, k, 4)).unwrap();
        let p1 = dir.path().join("a.medu");
        let p2 = dir.path().join("b.medu");
        save_checkpoint(&m, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        for ((_, a), (_, b)) in m.params().iter().zip(loaded.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}

#[test]
fn corrupt_checkpoints_give_structured_errors() {
    let m = Model::new(small(MedusaVariant::MedusaLinear, 2, 4)).unwrap();
    let bytes = checkpoint::to_bytes(&m).unwrap();
    for cut in [0, 3, 7, 15, 40, bytes.len() / 2, bytes.len() - 1] {
        match checkpoint::from_bytes(&bytes[..cut]) {
            Err(ModelError::Parse { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        checkpoint::from_bytes(&bad),
        Err(ModelError::Version { found: 9, .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        checkpoint::from_bytes(&bad),
        Err(ModelError::Parse { offset: 0, .. })
    ));
}

#[test]
fn header_disagreeing_with_arrays_is_an_integrity_error() {
    let m = Model::new(small(MedusaVariant::MedusaLinear, 2, 4)).unwrap();
    let other = Model::new(ModelConfig {
        d_ff: 32,
        ..small(MedusaVariant::MedusaLinear, 2, 4)
    })
    .unwrap();
    let a = checkpoint::to_bytes(&m).unwrap();
    let b = checkpoint::to_bytes(&other).unwrap();
    let header_end =
        |bytes: &[u8]| 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut spliced = b[..header_end(&b)].to_vec();
    spliced.extend_from_slice(&a[header_end(&a)..]);
    assert!(matches!(
        checkpoint::from_bytes(&spliced),
        Err(ModelError::Integrity(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cache_equivalence_for_any_prefix(seed in 0u64..1000, len in 1usize..31, split in 0usize..31) {
        let m = Model::new(small(MedusaVariant::None, 0, seed)).unwrap();
        let z = m.encode(&features(20, 6, seed)).unwrap();
        let toks = tokens(len, 16, seed);
        let split = split.min(len - 1);
        let full = m.decoder_hidden(&toks, &z, None).unwrap();
        let mut cache = m.new_cache(&z).unwrap();
        if split > 0 {
            m.decoder_hidden(&toks[..split], &z, Some(&mut cache)).unwrap();
        }
        let tail = m.decoder_hidden(&toks[split..], &z, Some(&mut cache)).unwrap();
        for (a, b) in full.data()[split * 16..].iter().zip(tail.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn head_rows_are_distributions(seed in 0u64..1000) {
        let mut m = Model::new(small(MedusaVariant::MedusaLinear, 3, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 1..=3 {
            let w = m.params_mut().get_mut(&format!("medusa.heads.{k}.weight")).unwrap();
            w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        }
        let z = m.encode(&features(6, 6, seed)).unwrap();
        let h = m.decoder_hidden(&[BOS], &z, None).unwrap();
        let d = m.medusa_forward(h.row(0), &z).unwrap();
        for k in 0..4 {
            let p = kernels::softmax(d.row(k));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
