//! Numerical criteria shared by the property suites and the acceptance run.

use jointctc::adcore::{Mode, Tensor};
use jointctc::beam::{joint_beam_search, DecodeConfig, ModelScorer};
use jointctc::ctc::{ctc_grad, ctc_log_likelihood, min_frames, LogProbLattice};
use jointctc::metrics::{bleu, corpus_rouge_l, corpus_wer, edit_distance, rouge_l_f1, wer};
use jointctc::model::{Activation, Model, ModelConfig, Sample};
use jointctc::prefix::PrefixState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    exhaustive_joint, oracle_bleu, oracle_edits, oracle_rouge_l, random_lattice, random_logits, random_sample,
    rel_err, sequences, PathTable,
};

#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

/// DP likelihood against path enumeration, 200 lattices, every target up to length 3.
pub fn ctc_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 1 + (seed as usize % 6);
        let labels = 1 + (seed as usize / 6) % 3;
        let lat = random_lattice(&mut rng, frames, labels);
        let paths = PathTable::new(&lat);
        for y in sequences(labels, 3) {
            let oracle = paths.log_likelihood(&y);
            match ctc_log_likelihood(&lat, &y) {
                Ok(dp) => {
                    worst = worst.max((dp - oracle).abs());
                    compared += 1;
                }
                Err(_) if oracle == f64::NEG_INFINITY && min_frames(&y) > frames => {}
                Err(e) => return Check::new(false, format!("seed {seed} target {y:?}: {e}")),
            }
        }
    }
    Check::new(worst <= 1e-9, format!("{compared} targets, max |dp - brute| = {worst:.2e}"))
}

/// The likelihoods of all label sequences sum to one.
pub fn ctc_distribution() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        for frames in 1..=4 {
            for labels in 1..=3 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + frames as u64 * 10 + labels as u64);
                let lat = random_lattice(&mut rng, frames, labels);
                let total: f64 = sequences(labels, frames)
                    .iter()
                    .filter_map(|y| ctc_log_likelihood(&lat, y).ok())
                    .map(f64::exp)
                    .sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
    }
    Check::new(worst <= 1e-9, format!("240 lattices, max |sum - 1| = {worst:.2e}"))
}

fn fd_max_rel(grad: &[f64], mut f: impl FnMut(usize, f64) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, &a) in grad.iter().enumerate() {
        let fd = (f(i, h) - f(i, -h)) / (2.0 * h);
        worst = worst.max(rel_err(a, fd));
    }
    worst
}

/// Worst relative error of `ctc_grad` over 20 random instances.
pub fn ctc_gradients() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let frames = rng.random_range(2..=7);
        let labels = rng.random_range(1..=4);
        let logits = random_logits(&mut rng, frames, labels + 1);
        let len = rng.random_range(1..=frames.div_ceil(2));
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..labels)).collect();
        if min_frames(&target) > frames {
            continue;
        }
        let (_, grad) = ctc_grad(&logits, &target).unwrap();
        let e = fd_max_rel(grad.data(), |i, d| {
            let mut x = logits.clone();
            x.data_mut()[i] += d;
            -ctc_log_likelihood(&LogProbLattice::from_logits(&x).unwrap(), &target).unwrap()
        });
        worst = worst.max(e);
    }
    worst
}

pub fn gradcheck_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        gls_layers: 1,
        txt_layers: 1,
        dec_layers: 1,
        ff_dim: 8,
        activation,
        dropout: 0.0,
        gloss_vocab: 5,
        text_vocab: 5,
        feature_dim: 2,
        max_positions: 8,
        init_gain: 1.0,
        ..ModelConfig::default()
    }
}

fn random_target(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    loop {
        let len = rng.random_range(1..=max_len);
        let y: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        if min_frames(&y) <= max_len {
            return y;
        }
    }
}

/// Worst relative error of the total-loss gradient of one tiny model over every parameter entry.
pub fn model_gradient(seed: u64) -> f64 {
    let activation = if seed % 2 == 0 { Activation::Softsign } else { Activation::Relu };
    let cfg = gradcheck_config(activation);
    let mut model = Model::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
    // Eight frames stacked in pairs give four encoder steps.
    let batch: Vec<Sample> = (0..2)
        .map(|id| {
            let gloss = random_target(&mut rng, cfg.gloss_vocab, 4);
            let text = random_target(&mut rng, cfg.text_vocab, 4);
            random_sample(&mut rng, id, 8, &cfg, gloss, text)
        })
        .collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let analytic = {
        let mut fw = model.forward(Mode::Train, 0);
        let (loss, _) = fw.total_loss(&refs).unwrap();
        let mut grads = fw.graph.backward(loss).unwrap();
        fw.param_grads(&mut grads)
    };
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        let e = fd_max_rel(grad.data(), |i, d| {
            let orig = model.params.get(name).unwrap().data()[i];
            model.params.get_mut(name).unwrap().data_mut()[i] = orig + d;
            let v = model.total_loss(&refs).unwrap().total;
            model.params.get_mut(name).unwrap().data_mut()[i] = orig;
            v
        });
        worst = worst.max(e);
    }
    worst
}

pub fn gradients() -> Check {
    let ctc = ctc_gradients();
    let model = (0..20).map(model_gradient).fold(0.0, f64::max);
    Check::new(
        ctc <= 1e-4 && model <= 1e-3,
        format!("ctc max rel {ctc:.2e} (bound 1e-4), tiny model max rel {model:.2e} (bound 1e-3)"),
    )
}

/// Largest violation of the eos and exhaustiveness identities over random lattices.
pub fn prefix_errors(seeds: std::ops::Range<u64>) -> (f64, f64) {
    let (mut eos_err, mut sum_err) = (0.0f64, 0.0f64);
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 1 + (seed as usize % 6);
        let labels = 1 + (seed as usize / 6) % 3;
        let lat = random_lattice(&mut rng, frames, labels);
        let mut stack = vec![PrefixState::init(&lat)];
        while let Some(state) = stack.pop() {
            let y = state.tokens().to_vec();
            if let Ok(ll) = ctc_log_likelihood(&lat, &y) {
                eos_err = eos_err.max((state.eos_score() - ll).abs());
            } else if state.eos_score().exp() > 1e-300 {
                eos_err = f64::INFINITY;
            }
            let mut mass = state.eos_score().exp();
            for c in 0..labels {
                let (score, next) = state.extend(c).unwrap();
                mass += score.exp();
                if next.len() <= 4 {
                    stack.push(next);
                }
            }
            sum_err = sum_err.max((mass - state.prefix_score().exp()).abs());
        }
    }
    (eos_err, sum_err)
}

pub fn prefix_consistency() -> Check {
    let (eos, sum) = prefix_errors(0..120);
    Check::new(
        eos <= 1e-9 && sum <= 1e-9,
        format!("eos vs likelihood {eos:.2e}, exhaustiveness {sum:.2e} (bounds 1e-9)"),
    )
}

pub fn beam_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        gls_layers: 1,
        txt_layers: 1,
        dec_layers: 1,
        ff_dim: 8,
        dropout: 0.0,
        gloss_vocab: 2,
        text_vocab: 2,
        feature_dim: 2,
        max_positions: 8,
        init_gain: 2.0,
        ..ModelConfig::default()
    }
}

/// Beam search with an exhaustive-width beam against enumeration of every
/// output; returns a description of the first disagreement.
pub fn beam_vs_exhaustive(seed: u64, cfg: &DecodeConfig) -> Result<(), String> {
    let mcfg = beam_config();
    let model = Model::new(mcfg.clone(), seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
    let features: Tensor = random_logits(&mut rng, 12, mcfg.feature_dim);
    let enc = model.encode(&features).map_err(|e| e.to_string())?;
    let lat = enc.txt_lattice.as_ref().ok_or("no text lattice")?;
    let scorer = ModelScorer {
        model: &model,
        h_txt: &enc.h_txt,
    };
    let beam = joint_beam_search(&scorer, lat, cfg).map_err(|e| e.to_string())?;
    let paths = PathTable::new(lat);
    let step = |p: &[usize]| model.decode_step(&enc.h_txt, p).unwrap();
    let all = exhaustive_joint(&step, mcfg.eos(), Some(&paths), cfg);
    let (b, o) = (&beam[0], &all[0]);
    if b.tokens != o.tokens || (b.score - o.score).abs() > 1e-9 {
        return Err(format!(
            "seed {seed}: beam {:?} ({:.12}) vs exhaustive {:?} ({:.12})",
            b.tokens, b.score, o.tokens, o.score
        ));
    }
    Ok(())
}

pub fn exhaustive_beam_config() -> DecodeConfig {
    DecodeConfig {
        beam_size: 81,
        max_len: 4,
        ..DecodeConfig::default()
    }
}

pub fn beam_equivalence() -> Check {
    let cfg = exhaustive_beam_config();
    for seed in 0..20 {
        if let Err(e) = beam_vs_exhaustive(seed, &cfg) {
            return Check::new(false, e);
        }
    }
    Check::new(true, "20 models, decoder vocab 3, L_max 4, N_beam 81: top-1 identical".into())
}

/// Hand-derived examples and random corpora against the naive oracles.
pub fn metric_oracles() -> Check {
    let mut worst = 0.0f64;
    let mut note = |v: f64, expect: f64| worst = worst.max((v - expect).abs());

    // Brevity penalty case: three of four reference tokens, no 4-gram.
    let b = bleu(&[vec![0, 1, 2, 3]], &[vec![0, 1, 2]]).unwrap();
    note(b[2], 100.0 * (-1.0f64 / 3.0).exp());
    note(b[2], oracle_bleu(&[vec![0, 1, 2, 3]], &[vec![0, 1, 2]], 3));
    let b3_close = (b[2] - 71.65).abs() < 5e-3;
    note(b[3], 0.0);
    // Two insertions against a single-token reference.
    note(wer(&[0], &[1, 2]).unwrap(), 2.0);
    note(wer(&[0, 1, 2], &[0, 2]).unwrap(), 1.0 / 3.0);
    note(rouge_l_f1(&[0, 1, 2], &[0, 2]), 0.8);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let mut refs = Vec::new();
        let mut hyps = Vec::new();
        for _ in 0..n {
            let rl = rng.random_range(1..9);
            let hl = rng.random_range(0..9);
            refs.push((0..rl).map(|_| rng.random_range(0..4)).collect::<Vec<usize>>());
            hyps.push((0..hl).map(|_| rng.random_range(0..4)).collect::<Vec<usize>>());
        }
        let b = bleu(&refs, &hyps).unwrap();
        for k in 1..=4 {
            note(b[k - 1], oracle_bleu(&refs, &hyps, k));
        }
        let rouge: f64 = refs.iter().zip(&hyps).map(|(r, h)| oracle_rouge_l(r, h)).sum::<f64>() / n as f64;
        note(corpus_rouge_l(&refs, &hyps).unwrap(), 100.0 * rouge);
        let edits: usize = refs.iter().zip(&hyps).map(|(r, h)| oracle_edits(r, h)).sum();
        let len: usize = refs.iter().map(Vec::len).sum();
        note(corpus_wer(&refs, &hyps).unwrap(), 100.0 * edits as f64 / len as f64);
        for (r, h) in refs.iter().zip(&hyps) {
            note(edit_distance(r, h) as f64, oracle_edits(r, h) as f64);
        }
    }
    Check::new(
        worst <= 1e-6 && b3_close,
        format!("B@3 brevity case {:.4}, max deviation from oracles {worst:.2e}", b[2]),
    )
}
