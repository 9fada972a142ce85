use latentomni::anchors::{l2_pool, pool_weights};
use latentomni::backbone::{ModelConfig, ModelState};
use latentomni::checkpoint;
use latentomni::interleave::{decode, validate_grammar, DecodeMode, DecodeOptions, HybridElement, LatentBudget};
use latentomni::losses::{sync_loss, text_loss, text_targets, total_loss, LossWeights, SyncPairSet};
use latentomni::ospe::{apply, FrequencyBasis};
use latentomni::synthworld::{generate_episode, EncoderBank, WorldConfig};
use latentomni::tensor::Tensor;
use latentomni::trainer::{lr_at, OptimState, TrainConfig};
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ospe_preserves_norm_and_depends_on_offsets(
        half in 1usize..9,
        q in vec_of(16),
        k in vec_of(16),
        t1 in -50.0..50.0f64,
        t2 in -50.0..50.0f64,
        s in -50.0..50.0f64,
    ) {
        let d = 2 * half;
        let basis = FrequencyBasis::new(d, 10000.0).unwrap();
        let (q, k) = (&q[..d], &k[..d]);
        let rq = apply(q, t1, &basis).unwrap();
        prop_assert!((norm(&rq) - norm(q)).abs() <= 1e-12 * (1.0 + norm(q)));
        let a = dot(&rq, &apply(k, t2, &basis).unwrap());
        let b = dot(&apply(q, t1 + s, &basis).unwrap(), &apply(k, t2 + s, &basis).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + norm(q) * norm(k)));
        prop_assert_eq!(apply(q, 0.0, &basis).unwrap(), q.to_vec());
    }

    #[test]
    fn text_loss_is_shift_invariant_and_nonnegative(
        rows in 1usize..5,
        vocab in 2usize..9,
        logits in vec_of(40),
        shift in -100.0..100.0f64,
        target_seed in any::<u64>(),
    ) {
        let data: Vec<f64> = logits[..rows * vocab].to_vec();
        let t = Tensor::new(vec![rows, vocab], data.clone()).unwrap();
        let shifted = Tensor::new(vec![rows, vocab], data.iter().map(|x| x + shift).collect()).unwrap();
        let targets: Vec<Option<usize>> =
            (0..rows).map(|r| Some((target_seed as usize).wrapping_add(r * 7) % vocab)).collect();
        let (a, n) = text_loss(&t, &targets).unwrap();
        let (b, _) = text_loss(&shifted, &targets).unwrap();
        prop_assert_eq!(n, rows);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn sync_loss_is_symmetric_and_bounded_below(
        n in 2usize..7,
        v in vec_of(7 * 3),
        a in vec_of(7 * 3),
        log_tau in -3.0..2.0f64,
    ) {
        let rows = |x: &[f64]| -> Vec<Vec<f64>> {
            (0..n).map(|i| x[3 * i..3 * i + 3].iter().map(|y| y + 0.01).collect()).collect()
        };
        let pairs = SyncPairSet::new(rows(&v), rows(&a), (0..n).map(|i| i as f64).collect()).unwrap();
        let tau = log_tau.exp();
        let l = sync_loss(&pairs, tau).unwrap();
        let r = sync_loss(&pairs.swapped(), tau).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l));
    }

    #[test]
    fn total_accounts_for_components(
        text in 0.0..10.0f64,
        latent in 0.0..100.0f64,
        sync in 0.0..10.0f64,
        l1 in 0.0..1.0f64,
        l2 in 0.0..2.0f64,
    ) {
        let b = total_loss(text, latent, sync, LossWeights { lambda1: l1, lambda2: l2 }).unwrap();
        prop_assert!((b.total - (text + l1 * latent + l2 * sync)).abs() <= 1e-12);
    }

    #[test]
    fn pooling_weights_are_a_distribution(frames in prop::collection::vec(vec_of(3), 1..12), target in 1usize..12) {
        if let Some(w) = pool_weights(&frames) {
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }
        match l2_pool(&frames, target) {
            Ok(out) => {
                prop_assert!(target <= frames.len());
                prop_assert_eq!(out.len(), target);
            }
            Err(_) => prop_assert!(target > frames.len()),
        }
    }

    #[test]
    fn lr_is_positive_and_capped(step in 0usize..1000, frac in 0.0..0.99f64, total in 1usize..1000) {
        let cfg = TrainConfig { warmup_fraction: frac, total_steps: total, ..TrainConfig::default() };
        let lr = lr_at(step.min(total - 1), &cfg);
        prop_assert!(lr > 0.0 && lr <= cfg.base_lr);
    }

    #[test]
    fn episodes_query_once_and_round_trip(seed in any::<u64>(), index in 0u64..1_000_000, t in 2usize..30) {
        let cfg = WorldConfig { seed, timesteps: t, visual_alphabet: 3, audio_alphabet: 5, ..WorldConfig::default() };
        let ep = generate_episode(&cfg, index);
        prop_assert_eq!(ep.visual.iter().filter(|&&s| s == ep.query).count(), 1);
        prop_assert_eq!(ep.visual[ep.t_star], ep.query);
        prop_assert_eq!(ep.answer, ep.audio[ep.t_star]);
        let bank = EncoderBank::new(&cfg);
        let seq = ep.sequence(&bank, LatentBudget::default(), 8).unwrap();
        prop_assert!(validate_grammar(&seq, LatentBudget::default()).is_ok());
        let line = serde_json::to_string(&ep).unwrap();
        prop_assert_eq!(serde_json::from_str::<latentomni::synthworld::Episode>(&line).unwrap(), ep);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn untrained_decodes_are_grammatical(
        model_seed in any::<u64>(),
        index in 0u64..10_000,
        sample in proptest::option::of(any::<u64>()),
        trigger_boost in 0.0..8.0f64,
    ) {
        let world = WorldConfig { timesteps: 4, visual_alphabet: 2, audio_alphabet: 3, feature_dim_visual: 4, feature_dim_audio: 4, ..WorldConfig::default() };
        let model = ModelState::init(
            ModelConfig { layers: 1, heads: 2, dim: 8, ff_dim: 8, vocab_size: world.vocab().min_size(), feature_dim_visual: 4, feature_dim_audio: 4, init_std: 0.5, ..ModelConfig::default() },
            model_seed,
        ).unwrap();
        let ep = generate_episode(&world, index);
        let budget = LatentBudget::default();
        let mut opts = DecodeOptions::greedy(budget, 8);
        opts.logit_bias = vec![(latentomni::vocab::TRIGGER, trigger_boost)];
        if let Some(seed) = sample {
            opts.mode = DecodeMode::Sampled { seed };
        }
        let out = decode(&model, &ep.prompt(&EncoderBank::new(&world)).unwrap(), &opts).unwrap();
        prop_assert!(validate_grammar(&out.sequence, budget).is_ok());
        let targets = text_targets(&out.sequence);
        let elements = out.sequence.elements();
        for (p, t) in targets.iter().enumerate() {
            if t.is_some() {
                prop_assert!(!matches!(elements[p + 1], HybridElement::Stop | HybridElement::Latent(_)));
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_any_model(seed in any::<u64>(), step in any::<u32>()) {
        let model = ModelState::init(
            ModelConfig { layers: 1, heads: 1, dim: 4, ff_dim: 4, vocab_size: 9, feature_dim_visual: 2, feature_dim_audio: 3, ..ModelConfig::default() },
            seed,
        ).unwrap();
        let mut optim = OptimState::new(&model);
        optim.step = u64::from(step);
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&model, &optim, None).unwrap()).unwrap();
        prop_assert_eq!(back.model, model);
        prop_assert_eq!(back.optim, optim);
    }
}
