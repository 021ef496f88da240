use contraspeech::data::{synth_utterances, AudioBuffer, SynthConfig};
use contraspeech::masked::{
    apply_mask, diversity_loss, masked_contrastive_loss, masked_objective, pretrain_masked, sample_mask,
    sample_masked_distractors, MaskSpec, MaskedConfig, MaskedModel, QuantizeMode, Quantizer, QuantizerConfig,
};
use contraspeech::nn::{grad_check_params, Binder, ParamSet};
use contraspeech::rng::{stream, Stream};
use contraspeech::tensor::{grad_check, Tape};
use contraspeech::train::TrainOptions;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn randn(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = stream(seed, Stream::Data);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn mask_boundaries() {
    let mut rng = stream(0, Stream::Mask);
    let all = sample_mask(37, &MaskSpec { start_probability: 1.0, span: 1 }, &mut rng);
    assert_eq!(all, (0..37).collect::<Vec<_>>());
    for seed in 0..20 {
        let m = sample_mask(50, &MaskSpec { start_probability: 0.0, span: 4 }, &mut stream(seed, Stream::Mask));
        assert!(!m.is_empty() && m.len() <= 4);
        assert!(m.windows(2).all(|w| w[1] == w[0] + 1));
    }
}

#[test]
fn default_mask_covers_about_half() {
    let spec = MaskSpec::default();
    assert!((spec.expected_fraction() - 0.4887).abs() < 1e-3);
    let fractions: Vec<f64> =
        (0..100).map(|s| sample_mask(1000, &spec, &mut stream(s, Stream::Mask)).len() as f64 / 1000.0).collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((mean - 0.49).abs() <= 0.05, "{mean}");
}

#[test]
fn masked_rows_take_the_embedding() {
    let tape = Tape::new();
    let z = tape.constant(randn(12, 1), &[4, 3]).unwrap();
    let emb = tape.constant(vec![7.0, 8.0, 9.0], &[3]).unwrap();
    let out = apply_mask(&z, &emb, &[1, 3]).unwrap().to_vec();
    let zv = z.to_vec();
    assert_eq!(&out[0..3], &zv[0..3]);
    assert_eq!(&out[3..6], &[7.0, 8.0, 9.0]);
    assert_eq!(&out[6..9], &zv[6..9]);
    assert_eq!(&out[9..12], &[7.0, 8.0, 9.0]);
}

fn quantizer(groups: usize, entries: usize, seed: u64) -> (ParamSet, Quantizer) {
    let mut params = ParamSet::new();
    let q = Quantizer::new(
        &mut params,
        "q",
        6,
        QuantizerConfig { groups, entries, codeword_dim: 3 },
        &mut stream(seed, Stream::Init),
    )
    .unwrap();
    (params, q)
}

#[test]
fn quantizer_assignments_are_one_hot_codewords() {
    let (params, q) = quantizer(2, 5, 1);
    let tape = Tape::new();
    let b = Binder::new(&tape, &params);
    let z = tape.constant(randn(8 * 6, 2), &[8, 6]).unwrap();
    let mut rng = stream(3, Stream::Gumbel);
    let out = q.quantize(&b, &z, QuantizeMode::Train { tau: 1e-4, rng: &mut rng }).unwrap();
    assert_eq!(out.values.shape(), vec![8, 6]);

    // At vanishing temperature the relaxed assignment is the hard one.
    let soft = out.soft.unwrap().to_vec();
    for t in 0..8 {
        for g in 0..2 {
            for e in 0..5 {
                let expected = if out.hard[t * 2 + g] == e { 1.0 } else { 0.0 };
                assert!((soft[t * 10 + g * 5 + e] - expected).abs() < 1e-6);
            }
        }
    }

    // Eval mode picks the plain argmax and reproduces the codeword path.
    let eval = q.quantize(&b, &z, QuantizeMode::Eval).unwrap();
    let probs = eval.probs.to_vec();
    for t in 0..8 {
        for g in 0..2 {
            let row = &probs[t * 10 + g * 5..t * 10 + g * 5 + 5];
            let best = (0..5).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(eval.hard[t * 2 + g], best);
        }
    }
}

#[test]
fn single_entry_codebook_gives_a_constant_sequence() {
    let (params, q) = quantizer(2, 1, 1);
    let tape = Tape::new();
    let b = Binder::new(&tape, &params);
    let z = tape.constant(randn(5 * 6, 4), &[5, 6]).unwrap();
    let mut rng = stream(3, Stream::Gumbel);
    let v = q.quantize(&b, &z, QuantizeMode::Train { tau: 1.0, rng: &mut rng }).unwrap().values.to_vec();
    for t in 1..5 {
        assert_eq!(&v[t * 6..t * 6 + 6], &v[0..6]);
    }
}

#[test]
fn straight_through_passes_gradient_to_logits() {
    let (params, q) = quantizer(2, 4, 1);
    let tape = Tape::new();
    let b = Binder::new(&tape, &params);
    let z = tape.constant(randn(6 * 6, 5), &[6, 6]).unwrap();
    let w = tape.constant(randn(6 * 6, 6), &[6, 6]).unwrap();
    let mut rng = stream(3, Stream::Gumbel);
    let out = q.quantize(&b, &z, QuantizeMode::Train { tau: 0.7, rng: &mut rng }).unwrap();
    let loss = out.values.mul(&w).unwrap().sum_all().unwrap();
    tape.backward(&loss).unwrap();
    let g = b.gradients();
    assert!(g["q.logits.weight"].iter().any(|v| v.abs() > 1e-6));

    let tape = Tape::new();
    let b = Binder::new(&tape, &params);
    let z = tape.constant(randn(6 * 6, 5), &[6, 6]).unwrap();
    let out = q.quantize(&b, &z, QuantizeMode::Eval).unwrap();
    tape.backward(&out.values.sum_all().unwrap()).unwrap();
    assert!(b.gradients().get("q.logits.weight").is_none_or(|g| g.iter().all(|v| *v == 0.0)));
}

#[test]
fn relaxed_assignments_pass_gradient_check() {
    let (params, q) = quantizer(2, 4, 1);
    let z = randn(5 * 6, 7);
    let w = randn(5 * 8, 8);
    let report = grad_check_params(
        &params,
        |b| {
            let z = b.tape().constant(z.clone(), &[5, 6])?;
            let w = b.tape().constant(w.clone(), &[5, 8])?;
            let mut rng = stream(3, Stream::Gumbel);
            let out = q.quantize(b, &z, QuantizeMode::Train { tau: 0.8, rng: &mut rng })?;
            out.soft.unwrap().mul(&w)?.sum_all()
        },
        1e-2,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.worst());
}

#[test]
fn uniform_candidates_give_log_n() {
    let tape = Tape::new();
    let (u, d) = (30, 4);
    let q = tape.constant([0.3f32, -1.0, 2.0, 0.5].repeat(u), &[u, d]).unwrap();
    let c = tape.constant(randn(u * d, 1), &[u, d]).unwrap();
    let masked: Vec<usize> = (0..u).step_by(2).collect();
    let l = masked_contrastive_loss(&q, &c, &masked, 10, 0.1, &mut stream(1, Stream::Distractor)).unwrap();
    assert!(l.candidates.iter().all(|s| s.len() == 11));
    let per_step = l.loss.item() as f64 / masked.len() as f64;
    assert!((per_step - 11f64.ln()).abs() < 1e-6, "{per_step}");
}

#[test]
fn saturated_similarities_give_near_zero_loss() {
    let tape = Tape::new();
    let d = 2;
    // Step 0 is the target (cos 1 with its context); steps 1..=10 point the other way.
    let mut qv = vec![1.0f32, 0.0];
    qv.extend([-1.0f32, 0.0].repeat(10));
    let q = tape.constant(qv, &[11, d]).unwrap();
    let c = tape.constant([1.0f32, 0.0].repeat(11), &[11, d]).unwrap();
    let masked: Vec<usize> = (0..11).collect();
    let l = masked_contrastive_loss(&q, &c, &masked, 10, 0.1, &mut stream(1, Stream::Distractor)).unwrap();
    let first = l.candidates[0].clone();
    assert_eq!(first[0], 0);
    // Loss of step 0 alone: ln(1 + 10 e^{-20}).
    let q0 = q.index_select(&first).unwrap();
    let c0 = c.index_select(&[0; 11]).unwrap();
    let logits = q0.cosine_rows(&c0).unwrap().reshape(&[1, 11]).unwrap().scale(10.0);
    let l0 = -logits.log_softmax(1).unwrap().to_vec()[0] as f64;
    assert!((l0 - (1.0 + 10.0 * (-20f64).exp()).ln()).abs() < 1e-7);
    assert!(l0 < 1e-7);
}

#[test]
fn cosine_of_identical_and_orthogonal_vectors() {
    let tape = Tape::new();
    let a = tape.constant(vec![1.0, 2.0, 0.0, 1.0], &[2, 2]).unwrap();
    let b = tape.constant(vec![2.0, 4.0, 1.0, 0.0], &[2, 2]).unwrap();
    let s = a.cosine_rows(&b).unwrap().to_vec();
    assert!((s[0] - 1.0).abs() < 1e-6);
    assert!(s[1].abs() < 1e-7);
}

#[test]
fn lone_masked_step_is_degenerate() {
    let tape = Tape::new();
    let q = tape.constant(randn(8, 1), &[4, 2]).unwrap();
    let c = tape.constant(randn(8, 2), &[4, 2]).unwrap();
    let l = masked_contrastive_loss(&q, &c, &[2], 5, 0.1, &mut stream(1, Stream::Distractor)).unwrap();
    assert!(l.degenerate);
    assert_eq!(l.loss.item(), 0.0);
}

#[test]
fn loss_ignores_candidate_scale() {
    let (u, d) = (12, 5);
    let masked: Vec<usize> = vec![0, 2, 3, 5, 7, 8, 11];
    let qv = randn(u * d, 3);
    let cv = randn(u * d, 4);
    let eval = |q: Vec<f32>| {
        let tape = Tape::new();
        let q = tape.constant(q, &[u, d]).unwrap();
        let c = tape.constant(cv.clone(), &[u, d]).unwrap();
        masked_contrastive_loss(&q, &c, &masked, 4, 0.1, &mut stream(5, Stream::Distractor)).unwrap().loss.item()
    };
    let base = eval(qv.clone());
    for (row, factor) in [(3usize, 7.5f32), (8, 0.02)] {
        let mut scaled = qv.clone();
        scaled[row * d..(row + 1) * d].iter_mut().for_each(|v| *v *= factor);
        let l = eval(scaled);
        assert!(((l - base) / base).abs() < 1e-6, "{l} vs {base}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn distractors_come_from_other_masked_steps(seed in 0u64..10_000, len in 2usize..60) {
        let mut rng = stream(seed, Stream::Mask);
        let masked = sample_mask(len, &MaskSpec { start_probability: 0.1, span: 4 }, &mut rng);
        for &u in &masked {
            let d = sample_masked_distractors(&masked, u, 5, &mut rng);
            prop_assert!(d.iter().all(|x| masked.contains(x) && *x != u));
            let others = masked.len() - 1;
            prop_assert_eq!(d.len(), if others == 0 { 0 } else { 5 });
            if others >= 5 {
                let mut s = d.clone();
                s.sort_unstable();
                s.dedup();
                prop_assert_eq!(s.len(), 5);
            }
        }
    }
}

#[test]
fn ten_thousand_draws_stay_inside_the_mask() {
    let mut rng = stream(9, Stream::Distractor);
    let mut unmasked = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(2..80);
        let masked = sample_mask(len, &MaskSpec::default(), &mut rng);
        let target = masked[rng.random_range(0..masked.len())];
        unmasked += sample_masked_distractors(&masked, target, 10, &mut rng)
            .iter()
            .filter(|d| !masked.contains(d))
            .count();
    }
    assert_eq!(unmasked, 0);
}

#[test]
fn contrastive_loss_gradients_match_finite_differences() {
    let (u, d) = (8, 4);
    let masked = vec![1, 2, 4, 5, 7];
    let report = grad_check(
        |_, p| {
            masked_contrastive_loss(&p[0], &p[1], &masked, 3, 0.5, &mut stream(2, Stream::Distractor)).map(|l| l.loss)
        },
        &[(randn(u * d, 1), vec![u, d]), (randn(u * d, 2), vec![u, d])],
        1e-2,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.worst());
}

#[test]
fn diversity_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(vec![0.25; 8], &[1, 8]).unwrap();
    assert!(diversity_loss(&uniform, 2, 4).unwrap().item().abs() < 1e-6);
    let collapsed = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[1, 8]).unwrap();
    assert!((diversity_loss(&collapsed, 2, 4).unwrap().item() - 1.0).abs() < 1e-6);

    let half = tape.constant(vec![0.5, 0.5], &[1, 2]).unwrap();
    assert!(diversity_loss(&half, 1, 2).unwrap().item().abs() < 1e-6);
    let skew = tape.constant(vec![0.9, 0.1], &[1, 2]).unwrap();
    let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    assert!((h - 0.325).abs() < 1e-3);
    let expected = 1.0 - h / 2f64.ln();
    assert!((diversity_loss(&skew, 1, 2).unwrap().item() as f64 - expected).abs() < 1e-6);
    assert!((expected - 0.531).abs() < 1e-3);

    // Averaging is over rows: two opposite one-hot rows are uniform on average.
    let rows = tape.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    assert!(diversity_loss(&rows, 1, 2).unwrap().item().abs() < 1e-6);
    // Any non-uniform average is penalized.
    let off = tape.constant(vec![0.26, 0.24, 0.25, 0.25], &[1, 4]).unwrap();
    assert!(diversity_loss(&off, 1, 4).unwrap().item() > 0.0);
}

#[test]
fn diversity_gradients_match_finite_differences() {
    let report = grad_check(
        |_, p| diversity_loss(&p[0].reshape(&[6, 3])?.softmax(1)?.reshape(&[3, 6])?, 2, 3),
        &[(randn(18, 4), vec![18])],
        1e-2,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.worst());
}

fn tiny_config() -> MaskedConfig {
    let mut cfg = MaskedConfig::desk();
    cfg.encoder.filters = vec![16, 16, 16, 32, 32, 32, 32];
    cfg.encoder.groups = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.context_blocks = 1;
    cfg.quantizer = QuantizerConfig { groups: 2, entries: 8, codeword_dim: 8 };
    cfg
}

#[test]
fn zero_diversity_weight_leaves_only_the_contrastive_gradient() {
    let model = MaskedModel::new(&tiny_config(), 1).unwrap();
    let wave: Vec<f32> = randn(16000, 2).iter().map(|v| v * 0.2).collect();
    let grads = |alpha: Option<f32>| {
        let tape = Tape::new();
        let b = Binder::new(&tape, &model.params);
        let s = model
            .step_loss(&b, &wave, 1.0, &mut stream(1, Stream::Mask), &mut stream(1, Stream::Gumbel))
            .unwrap();
        let q = model.config.quantizer;
        let div = diversity_loss(&s.probs, q.groups, q.entries).unwrap();
        let loss = match alpha {
            Some(a) => masked_objective(&s.contrastive, &div, a).unwrap(),
            None => s.contrastive.clone(),
        };
        tape.backward(&loss).unwrap();
        b.gradients()["quantizer.logits.weight"].clone()
    };
    let contrastive_only = grads(None);
    assert!(contrastive_only.iter().any(|v| *v != 0.0));
    assert_eq!(grads(Some(0.0)), contrastive_only);
    assert_ne!(grads(Some(0.1)), contrastive_only);
}

#[test]
fn initial_loss_is_near_uniform() {
    let wave: Vec<f32> = randn(16000, 3).iter().map(|v| v * 0.2).collect();
    let cfg = MaskedConfig::desk();
    let mut total = 0.0f64;
    let seeds = 100;
    for seed in 0..seeds {
        let model = MaskedModel::new(&cfg, seed).unwrap();
        let tape = Tape::inference();
        let b = Binder::new(&tape, &model.params);
        let s = model
            .step_loss(&b, &wave, 2.0, &mut stream(seed, Stream::Mask), &mut stream(seed, Stream::Gumbel))
            .unwrap();
        total += s.contrastive.item() as f64 / s.masked as f64;
    }
    let mean = total / seeds as f64;
    let ln_n = ((cfg.distractors + 1) as f64).ln();
    assert!(((mean - ln_n) / ln_n).abs() < 0.10, "{mean} vs {ln_n}");
}

fn corpus(n: usize, seed: u64) -> Vec<AudioBuffer> {
    let cfg = SynthConfig { num_utts: n, tokens_per_utt: 8, vocab_size: 5, seed };
    synth_utterances(&cfg, "u").unwrap().into_iter().map(|u| u.audio).collect()
}

#[test]
fn pretraining_beats_the_uniform_baseline() {
    let data = corpus(16, 1);
    let cfg = MaskedConfig::desk();
    let mut opts = TrainOptions::new(200, 5, 3.0);
    opts.lr_high = 1e-3;
    opts.lr_low = 3e-4;
    let (_, log) = pretrain_masked(&data, &cfg, &opts).unwrap();
    let tail: f64 = log[180..].iter().map(|r| r.components[0] as f64).sum::<f64>() / 20.0;
    let ln_n = ((cfg.distractors + 1) as f64).ln();
    assert!(tail < ln_n, "{tail} vs {ln_n}");
    for r in &log {
        assert_eq!(r.components.len(), 2);
        assert!((0.0..=1.0).contains(&r.components[1]));
    }
}

#[test]
fn pretraining_is_deterministic() {
    let data = corpus(3, 2);
    let opts = TrainOptions::new(3, 9, 2.0);
    let (a, la) = pretrain_masked(&data, &tiny_config(), &opts).unwrap();
    let (b, lb) = pretrain_masked(&data, &tiny_config(), &opts).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(la, lb);
    let feats = a.extract(&data[0].samples).unwrap();
    assert_eq!(feats.cols(), 32);
    assert_eq!(Some(feats.rows()), tiny_config().encoder.output_len(data[0].samples.len()));
}
