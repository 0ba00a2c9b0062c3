mod common;

use common::{features, random_medusa, scramble_medusa, small};
use medusa::decoding::{
    acceptance_threshold, assisted_decode, entropy_exponent, greedy_decode, medusa_decode,
    medusa_propose, medusa_verify, AcceptMode, LengthPenalty, Session, VerificationPolicy,
};
use medusa::model::{MedusaVariant, Model, EOS};
use proptest::prelude::*;

const MAX_LEN: usize = 30;

#[test]
fn exact_match_reproduces_greedy() {
    let policy = VerificationPolicy::exact_match();
    for seed in 0..3 {
        for variant in [MedusaVariant::MedusaLinear, MedusaVariant::MedusaBlock] {
            let m = random_medusa(variant, 3, seed);
            for u in 0..6 {
                let f = features(9 + 9 * u as usize, 6, 100 * seed + u);
                let none = LengthPenalty::disabled();
                let g = greedy_decode(&m, &f, MAX_LEN, &none).unwrap();
                let r = medusa_decode(&m, &f, MAX_LEN, &policy, &none).unwrap();
                assert_eq!(g.tokens, r.tokens, "seed {seed} utt {u} {variant:?}");
            }
        }
    }
}

#[test]
fn exact_match_reproduces_greedy_under_length_penalty() {
    let m = random_medusa(MedusaVariant::MedusaLinear, 4, 11);
    let penalty = LengthPenalty::new(3, 1.5).unwrap();
    for u in 0..5 {
        let f = features(30, 6, u);
        let g = greedy_decode(&m, &f, MAX_LEN, &penalty).unwrap();
        let r = medusa_decode(
            &m,
            &f,
            MAX_LEN,
            &VerificationPolicy::exact_match(),
            &penalty,
        )
        .unwrap();
        assert_eq!(g.tokens, r.tokens);
    }
}

#[test]
fn assisted_reproduces_main_greedy() {
    let main = Model::new(small(MedusaVariant::None, 0, 3)).unwrap();
    for a_seed in [10, 20, 30] {
        let assistant = Model::new(small(MedusaVariant::None, 0, a_seed)).unwrap();
        for u in 0..5 {
            let f = features(24, 6, u + a_seed);
            let g = greedy_decode(&main, &f, MAX_LEN, &LengthPenalty::disabled()).unwrap();
            for draft in [1, 3, 5] {
                let r = assisted_decode(&main, &assistant, &f, MAX_LEN, draft).unwrap();
                assert_eq!(g.tokens, r.tokens);
                assert!(r.n_decoder_forward_passes <= g.n_decoder_forward_passes);
                assert!(r.n_assistant_forward_passes > 0);
            }
        }
    }
}

#[test]
fn assisted_with_itself_accepts_every_draft() {
    let main = Model::new(small(MedusaVariant::None, 0, 4)).unwrap();
    let f = features(30, 6, 1);
    let g = greedy_decode(&main, &f, MAX_LEN, &LengthPenalty::disabled()).unwrap();
    let r = assisted_decode(&main, &main, &f, MAX_LEN, 4).unwrap();
    assert_eq!(g.tokens, r.tokens);
    assert_eq!(r.n_decoder_forward_passes, r.n_iterations);
    assert_eq!(r.n_iterations, g.tokens.len().div_ceil(5));
}

#[test]
fn no_heads_costs_two_passes_per_token() {
    let m = Model::new(small(MedusaVariant::None, 0, 5)).unwrap();
    let f = features(21, 6, 5);
    let none = LengthPenalty::disabled();
    let g = greedy_decode(&m, &f, MAX_LEN, &none).unwrap();
    let r = medusa_decode(&m, &f, MAX_LEN, &VerificationPolicy::default(), &none).unwrap();
    assert_eq!(g.tokens, r.tokens);
    assert_eq!(r.n_decoder_forward_passes, 2 * g.n_decoder_forward_passes);
}

/// Model whose base head always prefers EOS.
fn eos_model() -> Model {
    let mut m = Model::new(small(MedusaVariant::MedusaLinear, 3, 6)).unwrap();
    m.params_mut().get_mut("base_proj.bias").unwrap().data_mut()[EOS] = 100.0;
    m.params_mut()
        .get_mut("medusa.proj.bias")
        .unwrap()
        .data_mut()[EOS] = 100.0;
    m
}

#[test]
fn eos_first_stops_after_one_iteration() {
    let m = eos_model();
    let f = features(15, 6, 0);
    let none = LengthPenalty::disabled();
    let g = greedy_decode(&m, &f, MAX_LEN, &none).unwrap();
    assert_eq!(g.tokens, vec![EOS]);
    assert_eq!(g.n_decoder_forward_passes, 1);
    let r = medusa_decode(&m, &f, MAX_LEN, &VerificationPolicy::default(), &none).unwrap();
    assert_eq!(r.tokens, vec![EOS]);
    assert_eq!(r.accepted_per_iteration, vec![1]);
    assert_eq!(r.n_decoder_forward_passes, 2);
}

#[test]
fn verify_never_accepts_past_eos() {
    let m = random_medusa(MedusaVariant::MedusaLinear, 3, 8);
    let mut s = Session::new(&m, &features(15, 6, 3)).unwrap();
    let none = LengthPenalty::disabled();
    assert!(medusa_verify(&mut s, &[5], &VerificationPolicy::default(), &none).is_err());
    medusa_propose(&mut s, &none).unwrap();
    let accepted = medusa_verify(
        &mut s,
        &[5, EOS, 7, 8],
        &VerificationPolicy::exact_match(),
        &LengthPenalty::disabled(),
    )
    .unwrap();
    assert!(accepted <= 2);
    assert_eq!(s.tokens(), &[5, EOS][..accepted]);
    assert_eq!(s.cache().len(), accepted);
    assert_eq!(s.passes(), 2);
}

#[test]
fn verify_accepts_greedy_continuation_in_full() {
    let m = random_medusa(MedusaVariant::MedusaLinear, 4, 9);
    let f = features(30, 6, 4);
    let g = greedy_decode(&m, &f, MAX_LEN, &LengthPenalty::disabled()).unwrap();
    let want: Vec<usize> = g.tokens.iter().copied().take(5).collect();
    let mut s = Session::new(&m, &f).unwrap();
    medusa_propose(&mut s, &LengthPenalty::disabled()).unwrap();
    let accepted = medusa_verify(
        &mut s,
        &want,
        &VerificationPolicy::exact_match(),
        &LengthPenalty::disabled(),
    )
    .unwrap();
    assert_eq!(accepted, want.len());
    assert_eq!(s.tokens(), &want[..]);
    assert_eq!(s.passes(), 2);
}

#[test]
fn verify_always_accepts_first_candidate() {
    let m = random_medusa(MedusaVariant::MedusaLinear, 2, 12);
    let mut s = Session::new(&m, &features(12, 6, 0)).unwrap();
    let strict = VerificationPolicy {
        epsilon: 0.999,
        alpha: 1.0,
        mode: AcceptMode::Typical,
    };
    medusa_propose(&mut s, &LengthPenalty::disabled()).unwrap();
    let accepted = medusa_verify(&mut s, &[4, 4, 4], &strict, &LengthPenalty::disabled()).unwrap();
    assert!(accepted >= 1);
    assert_eq!(s.tokens()[0], 4);
}

#[test]
fn threshold_hand_cases() {
    let policy = VerificationPolicy::default();
    let mut one_hot = vec![0.0; 16];
    one_hot[3] = 1.0;
    assert!((acceptance_threshold(&one_hot, &policy).unwrap() - 0.09).abs() < 1e-12);
    let uniform = vec![1.0 / 16.0; 16];
    assert!((acceptance_threshold(&uniform, &policy).unwrap() - 0.01875).abs() < 1e-12);
    assert!((entropy_exponent(&uniform).unwrap() - 1.0 / 16.0).abs() < 1e-12);
}

#[test]
fn max_len_caps_output() {
    let m = random_medusa(MedusaVariant::MedusaLinear, 4, 13);
    let f = features(60, 6, 2);
    for max_len in [1, 2, 3, 7] {
        let g = greedy_decode(&m, &f, max_len, &LengthPenalty::disabled()).unwrap();
        let r = medusa_decode(
            &m,
            &f,
            max_len,
            &VerificationPolicy::exact_match(),
            &LengthPenalty::disabled(),
        )
        .unwrap();
        assert!(r.tokens.len() <= max_len);
        assert_eq!(g.tokens, r.tokens);
    }
    assert!(greedy_decode(&m, &f, 31, &LengthPenalty::disabled()).is_err());
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_is_bounded_and_monotone_in_alpha(
        raw in prop::collection::vec(1e-6f64..1.0, 2..40),
        a1 in 0.01f64..1.0,
        a2 in 0.01f64..1.0,
        eps in 0.01f64..0.99,
    ) {
        let p = distribution(&raw);
        let lo = VerificationPolicy { epsilon: eps, alpha: a1.min(a2), mode: AcceptMode::Typical };
        let hi = VerificationPolicy { alpha: a1.max(a2), ..lo };
        let t_lo = acceptance_threshold(&p, &lo).unwrap();
        let t_hi = acceptance_threshold(&p, &hi).unwrap();
        prop_assert!(t_lo > 0.0 && t_lo <= eps);
        prop_assert!(t_lo <= t_hi);
        let h: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        prop_assert!((t_hi - eps.min(hi.alpha * (-h).exp())).abs() < 1e-12);
    }

    #[test]
    fn sharper_distributions_get_higher_thresholds(
        raw in prop::collection::vec(0.1f64..1.0, 2..20),
        temp in 1.5f64..6.0,
    ) {
        let p = distribution(&raw);
        let sharp = distribution(&p.iter().map(|x| x.powf(temp)).collect::<Vec<_>>());
        let policy = VerificationPolicy { epsilon: 0.99, alpha: 1.0, mode: AcceptMode::Typical };
        prop_assert!(acceptance_threshold(&sharp, &policy).unwrap() >= acceptance_threshold(&p, &policy).unwrap() - 1e-12);
    }

    #[test]
    fn accounting_invariants(seed in 0u64..1000, frames in 3usize..60, k in 1usize..5, typical: bool) {
        let mut m = Model::new(small(MedusaVariant::MedusaLinear, k, seed)).unwrap();
        scramble_medusa(&mut m, 0.5, seed);
        let f = features(frames, 6, seed + 1);
        let policy = if typical { VerificationPolicy::default() } else { VerificationPolicy::exact_match() };
        let none = LengthPenalty::disabled();
        let r = medusa_decode(&m, &f, MAX_LEN, &policy, &none).unwrap();
        let g = greedy_decode(&m, &f, MAX_LEN, &none).unwrap();
        prop_assert_eq!(r.n_decoder_forward_passes, 2 * r.n_iterations);
        prop_assert_eq!(r.accepted_per_iteration.len(), r.n_iterations);
        prop_assert_eq!(r.accepted_per_iteration.iter().sum::<usize>(), r.tokens.len());
        prop_assert!(r.accepted_per_iteration.iter().all(|&a| (1..=k + 1).contains(&a)));
        prop_assert!(r.tokens.len() <= MAX_LEN);
        prop_assert_eq!(r.tokens.iter().filter(|&&t| t == EOS).count(), usize::from(r.tokens.last() == Some(&EOS)));
        prop_assert_eq!(r.tokens[0], g.tokens[0]);
        prop_assert_eq!(g.n_decoder_forward_passes, g.tokens.len());
    }
}
