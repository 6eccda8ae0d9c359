mod common;

use common::checks::{self, beam_config, beam_vs_exhaustive, exhaustive_beam_config};
use common::{exhaustive_joint, random_logits, PathTable};
use jointctc::beam::{attention_beam_search, joint_beam_search, DecodeConfig, ModelScorer};
use jointctc::model::Model;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn exhaustive_width_beam_finds_the_joint_argmax() {
    let c = checks::beam_equivalence();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn exhaustive_width_without_length_bonus_or_ctc() {
    for (seed, cfg) in [
        (30, DecodeConfig { length_penalty: 0.0, ..exhaustive_beam_config() }),
        (31, DecodeConfig { ctc_weight: 1.0, ..exhaustive_beam_config() }),
        (32, DecodeConfig { ctc_weight: 0.0, max_len: 3, ..exhaustive_beam_config() }),
    ] {
        beam_vs_exhaustive(seed, &cfg).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn narrow_beams_return_ranked_finished_hypotheses(
        seed in 0u64..10_000,
        beam_size in 1usize..=6,
        max_len in 1usize..=5,
        ctc_weight in 0.0f64..=1.0,
    ) {
        let mcfg = beam_config();
        let model = Model::new(mcfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = model.encode(&random_logits(&mut rng, 12, mcfg.feature_dim)).unwrap();
        let lat = enc.txt_lattice.as_ref().unwrap();
        let scorer = ModelScorer { model: &model, h_txt: &enc.h_txt };
        let cfg = DecodeConfig { beam_size, max_len, ctc_weight, ..DecodeConfig::default() };
        let hyps = joint_beam_search(&scorer, lat, &cfg).unwrap();
        prop_assert!(!hyps.is_empty());
        for h in &hyps {
            prop_assert!(h.finished);
            prop_assert!(h.tokens.len() <= max_len);
            prop_assert!(h.text().iter().all(|&t| t < mcfg.eos()));
        }
        for w in hyps.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        // A pruned search can only fall short of the exhaustive optimum.
        let paths = PathTable::new(lat);
        let step = |p: &[usize]| model.decode_step(&enc.h_txt, p).unwrap();
        let best = exhaustive_joint(&step, mcfg.eos(), Some(&paths), &cfg)[0].score;
        prop_assert!(hyps[0].score <= best + 1e-9);

        let attn = attention_beam_search(&scorer, &cfg).unwrap();
        let zero = joint_beam_search(&scorer, lat, &DecodeConfig { ctc_weight: 0.0, ..cfg.clone() }).unwrap();
        let toks = |v: &[jointctc::beam::Hypothesis]| v.iter().map(|h| h.tokens.clone()).collect::<Vec<_>>();
        prop_assert_eq!(toks(&attn), toks(&zero));
    }
}
