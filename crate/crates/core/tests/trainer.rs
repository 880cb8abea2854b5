use aidd_core::diffusion::NoiseSchedule;
use aidd_core::net::{ModelConfig, ScoreNetwork};
use aidd_core::rng;
use aidd_core::tokens::TokenSequence;
use aidd_core::train::{corrupt_batch, make_batches, train_step, train_until, MetricsLog, TrainConfig, TrainState};
use aidd_core::Error;

fn model(vocab: u32, context: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        dim: 32,
        depth: 2,
        heads: 2,
        context_length: context,
        mlp_ratio: 2,
        time_features: 16,
    }
}

fn corpus(vocab: u32, len: usize, seed: u64) -> Vec<TokenSequence> {
    use rand::Rng;
    let mut r = rng::stream(seed, &[7]);
    (0..3)
        .map(|_| {
            let ids = (0..len).map(|_| r.random_range(0..vocab)).collect();
            TokenSequence::new(ids, vocab, 62.5).unwrap()
        })
        .collect()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        sequence_length: 16,
        warmup_steps: 5,
        checkpoint_interval: 5,
        log_interval: 5,
        seed: 42,
        ..TrainConfig::overfit()
    }
}

fn run(steps: u64) -> TrainState {
    let cfg = small_config();
    let batches = make_batches(&corpus(8, 40, 1), &cfg).unwrap();
    let mut st = TrainState::new(ScoreNetwork::init(model(8, 16), 3).unwrap());
    train_until::<Vec<u8>>(&mut st, &batches, &NoiseSchedule::default(), &cfg, steps, None, |_| Ok(())).unwrap();
    st
}

#[test]
fn delta_corpus_loss_halves_within_2000_steps() {
    let pattern: Vec<u32> = (0..32).map(|i| (i * 7 % 16) as u32).collect();
    let seq = TokenSequence::new(pattern, 16, 62.5).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        sequence_length: 32,
        learning_rate: 1e-3,
        warmup_steps: 50,
        seed: 5,
        ..TrainConfig::overfit()
    };
    let batches = make_batches(&[seq], &cfg).unwrap();
    let mut st = TrainState::new(ScoreNetwork::init(model(16, 32), 0).unwrap());
    let sched = NoiseSchedule::default();
    let mut first = Vec::new();
    let mut last = Vec::new();
    let mut reached = None;
    for k in 0..2000 {
        let rep = train_step(&mut st, &batches.batch(k), &sched, &cfg).unwrap();
        assert!(rep.loss.is_finite());
        if k < 50 {
            first.push(rep.loss);
        }
        last.push(rep.loss);
        if last.len() > 50 {
            last.remove(0);
        }
        let start: f64 = first.iter().sum::<f64>() / first.len() as f64;
        let now: f64 = last.iter().sum::<f64>() / last.len() as f64;
        if k >= 100 && now <= 0.5 * start {
            reached = Some(k);
            break;
        }
    }
    assert!(reached.is_some(), "loss did not halve: first {first:?} last {last:?}");
}

#[test]
fn training_is_deterministic() {
    assert_eq!(run(12), run(12));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = small_config();
    let batches = make_batches(&corpus(8, 40, 1), &cfg).unwrap();
    let sched = NoiseSchedule::default();
    let mut st = TrainState::new(ScoreNetwork::init(model(8, 16), 3).unwrap());
    train_until::<Vec<u8>>(&mut st, &batches, &sched, &cfg, 7, None, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.aidt");
    st.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed, st);
    train_until::<Vec<u8>>(&mut resumed, &batches, &sched, &cfg, 17, None, |_| Ok(())).unwrap();
    assert_eq!(resumed, run(17));
}

#[test]
fn corruption_masks_depend_only_on_step() {
    let cfg = small_config();
    let batches = make_batches(&corpus(8, 40, 1), &cfg).unwrap();
    let sched = NoiseSchedule::default();
    let stream = |from: u64| -> Vec<_> {
        (from..100)
            .map(|k| corrupt_batch(&batches.batch(k), 8, k, &cfg, &sched).unwrap())
            .collect()
    };
    let full = stream(0);
    let tail = stream(40);
    assert_eq!(&full[40..], &tail[..]);
    assert!(full.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn crop_offsets_are_uniform() {
    // One sequence of length 40 with crops of 16 has 25 offsets.
    let cfg = small_config();
    let batches = make_batches(&corpus(8, 40, 1)[..1], &cfg).unwrap();
    let mut r = rng::stream(9, &[]);
    let draws = 10_000;
    let mut counts = [0f64; 25];
    for _ in 0..draws {
        let (seq, off) = batches.draw_crop(&mut r);
        assert_eq!(seq, 0);
        counts[off] += 1.0;
    }
    let expected = draws as f64 / 25.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // 0.99 quantile of chi-square with 24 degrees of freedom.
    assert!(chi2 < 42.98, "chi2 = {chi2}");
}

#[test]
fn time_conditioning_is_live_after_training() {
    let st = run(3);
    let x = TokenSequence::new(vec![1, 8, 3, 8, 8, 0], 8, 62.5).unwrap();
    let a = st.net.forward(&x, 0.1).unwrap();
    let b = st.net.forward(&x, 0.9).unwrap();
    assert_ne!(a, b);
}

#[test]
fn metrics_log_and_checkpoint_cadence() {
    let cfg = small_config();
    let batches = make_batches(&corpus(8, 40, 1), &cfg).unwrap();
    let mut st = TrainState::new(ScoreNetwork::init(model(8, 16), 3).unwrap());
    let mut buf = Vec::new();
    let mut saved = Vec::new();
    {
        let mut log = MetricsLog::new(&mut buf, true).unwrap();
        train_until(&mut st, &batches, &NoiseSchedule::default(), &cfg, 15, Some(&mut log), |s| {
            saved.push(s.step);
            Ok(())
        })
        .unwrap();
    }
    assert_eq!(saved, vec![5, 10, 15]);
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss_ema,wall_time");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("15,"));
}

#[test]
fn crop_longer_than_context_is_rejected() {
    let mut cfg = small_config();
    cfg.sequence_length = 32;
    let batches = make_batches(&corpus(8, 40, 1), &cfg).unwrap();
    let mut st = TrainState::new(ScoreNetwork::init(model(8, 16), 3).unwrap());
    let err = train_until::<Vec<u8>>(&mut st, &batches, &NoiseSchedule::default(), &cfg, 1, None, |_| Ok(()));
    assert!(matches!(err, Err(Error::InvalidConfig(_))));
}
