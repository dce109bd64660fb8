mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use common::*;
use rand::Rng;
use rlpf::diffusion::{sample_trajectory, AtomCountHistogram};
use rlpf::pipeline::*;
use rlpf::reward::{RewardKind, RewardRecord};
use rlpf::{Error, ScheduleKind, SeedSpec};

const STEPS: usize = 10;

fn tiny_checkpoint() -> Checkpoint {
    let mut counts = vec![0; 7];
    counts[3] = 2;
    counts[4] = 3;
    counts[5] = 3;
    counts[6] = 2;
    Checkpoint {
        epoch: 0,
        master_seed: 0,
        config_digest: 0,
        schedule_kind: ScheduleKind::Polynomial,
        steps: STEPS,
        params: jittered_params(2, 8, 4, SeedSpec::new(51, 0), 0.05),
        optimizer: None,
        running: None,
        histogram: AtomCountHistogram { counts },
        training_hashes: vec![1, 2, 3],
    }
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.steps = STEPS;
    cfg.trajectories = 8;
    cfg.max_epochs = 3;
    cfg.minibatch = 20;
    cfg.optimizer.lr = 1e-3;
    cfg.force_threshold = None;
    cfg.kl_probe_trajectories = 2;
    cfg.master_seed = 5;
    cfg
}

fn metrics_csv(run: &RunArtifacts) -> String {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let rows: Vec<EpochMetrics> = run.epochs.iter().map(|e| e.metrics).collect();
    write_metrics_csv(&p, &rows).unwrap();
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn worker_count_does_not_change_results() {
    let pre = tiny_checkpoint();
    let table = table();
    let mut runs = Vec::new();
    for (samplers, workers) in [(1, 1), (2, 4), (3, 8)] {
        let mut cfg = tiny_config();
        cfg.sampler_threads = samplers;
        cfg.reward_workers = workers;
        cfg.queue_capacity = 3;
        runs.push(run_finetune(&cfg, &pre, &table).unwrap());
    }
    for r in &runs[1..] {
        for (a, b) in runs[0].epochs.iter().zip(&r.epochs) {
            assert_eq!(a.rewards, b.rewards);
            assert_eq!(a.sampler_fingerprints, b.sampler_fingerprints);
        }
        assert_eq!(metrics_csv(&runs[0]), metrics_csv(r));
        assert_eq!(runs[0].final_checkpoint, r.final_checkpoint);
    }
}

#[test]
fn every_trajectory_in_an_epoch_uses_theta_old() {
    let run = run_finetune(&tiny_config(), &tiny_checkpoint(), &table()).unwrap();
    let mut prev = None;
    for e in &run.epochs {
        let f = e.sampler_fingerprints[0];
        assert!(e.sampler_fingerprints.iter().all(|&g| g == f));
        assert_ne!(Some(f), prev);
        prev = Some(f);
    }
}

#[test]
fn queue_never_exceeds_capacity() {
    let rewarded = AtomicUsize::new(0);
    let out = reward_pipeline(
        24,
        |i| Ok(i * 10),
        |_, v| {
            std::thread::sleep(Duration::from_millis(5));
            rewarded.fetch_add(1, Ordering::Relaxed);
            RewardRecord { value: *v as f64, kind: RewardKind::Force, penalty: false, raw_rmsd: None }
        },
        RewardKind::Force,
        PipelineConfig { samplers: 2, workers: 1, capacity: 2 },
    )
    .unwrap();
    assert!(out.max_queue_len <= 2);
    assert!(out.max_queue_len >= 1);
    assert_eq!(rewarded.load(Ordering::Relaxed), 24);
    assert_eq!(out.items, (0..24).map(|i| i * 10).collect::<Vec<_>>());
    assert!(out.rewards.iter().enumerate().all(|(i, r)| r.value == (i * 10) as f64));
}

#[test]
fn panicking_reward_is_isolated() {
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let out = reward_pipeline(
        16,
        Ok,
        |i, _| {
            if i == 7 {
                panic!("reward worker failure");
            }
            RewardRecord { value: -0.1, kind: RewardKind::Force, penalty: false, raw_rmsd: Some(0.1) }
        },
        RewardKind::Force,
        PipelineConfig { samplers: 1, workers: 4, capacity: 4 },
    )
    .unwrap();
    std::panic::set_hook(hook);
    for (i, r) in out.rewards.iter().enumerate() {
        if i == 7 {
            assert!(r.penalty);
            assert_eq!(r.value, -5.0);
        } else {
            assert!(!r.penalty);
            assert_eq!(r.value, -0.1);
        }
    }
}

#[test]
fn sampler_errors_propagate() {
    let out = reward_pipeline(
        10,
        |i| if i == 4 { Err(Error::EmptyMolecule) } else { Ok(i) },
        |_, _| RewardRecord::penalty(RewardKind::Force),
        RewardKind::Force,
        PipelineConfig { samplers: 2, workers: 2, capacity: 2 },
    );
    assert!(matches!(out, Err(Error::EmptyMolecule)));
    assert!(reward_pipeline(1, Ok, |_, _| RewardRecord::penalty(RewardKind::Force), RewardKind::Force, PipelineConfig { samplers: 1, workers: 0, capacity: 1 }).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config();
    let run = run_finetune(&cfg, &tiny_checkpoint(), &table()).unwrap();
    let ck = run.final_checkpoint;
    assert!(ck.optimizer.is_some());
    let bytes = ck.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    ck.save(&p).unwrap();
    assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let pre = tiny_checkpoint();
    let mut cfg = tiny_config();
    cfg.optimizer.lr = 0.0;
    let run = run_finetune(&cfg, &pre, &table()).unwrap();
    assert_eq!(run.final_checkpoint.params, pre.params);
    for e in &run.epochs {
        assert_eq!(e.metrics.kl_to_pretrained, 0.0);
        assert_eq!(e.metrics.mean_ratio, 1.0);
    }
}

#[test]
fn kl_is_zero_at_reference_and_grows_with_noise() {
    let pre = tiny_checkpoint();
    let s = pre.schedule().unwrap();
    let probes: Vec<_> = (0..3)
        .flat_map(|k| sample_trajectory(&pre.params, 4, &s, SeedSpec::new(52, k)).unwrap().states.into_iter().filter(|st| st.t >= 1))
        .collect();
    assert_eq!(kl_to_reference(&pre.params, &pre.params, &probes, &s).unwrap(), 0.0);

    let probe_set = KlProbes::new(&pre.params, probes, &s).unwrap();
    let mut direction = pre.params.clone();
    let mut rng = SeedSpec::new(52, 99).rng();
    for v in direction.flat_view_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut kls = Vec::new();
    for trial in 0..20 {
        let mag = 1e-4 * (trial + 1) as f64;
        let mut p = pre.params.clone();
        for (v, d) in p.flat_view_mut().iter_mut().zip(direction.flat_view()) {
            *v += mag * d;
        }
        kls.push(probe_set.kl(&p, &s).unwrap());
    }
    let n = kls.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| kls[a].partial_cmp(&kls[b]).unwrap());
    let mut pos = vec![0usize; n];
    for (r, &i) in rank.iter().enumerate() {
        pos[i] = r;
    }
    let d2: f64 = (0..n).map(|i| (pos[i] as f64 - i as f64).powi(2)).sum();
    let spearman = 1.0 - 6.0 * d2 / (n * (n * n - 1)) as f64;
    assert!(spearman > 0.9, "{spearman} {kls:?}");
}

#[test]
fn replay_is_deterministic() {
    let pre = tiny_checkpoint();
    let a = run_finetune(&tiny_config(), &pre, &table()).unwrap();
    let b = run_finetune(&tiny_config(), &pre, &table()).unwrap();
    assert_eq!(metrics_csv(&a), metrics_csv(&b));
    let mut other = tiny_config();
    other.master_seed = 6;
    let c = run_finetune(&other, &pre, &table()).unwrap();
    assert_ne!(metrics_csv(&a), metrics_csv(&c));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let pre = tiny_checkpoint();
    let table = table();
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = tiny_config();
    full.max_epochs = 5;
    full.checkpoint_dir = Some(full_dir.path().to_path_buf());
    run_finetune(&full, &pre, &table).unwrap();

    let cut_dir = tempfile::tempdir().unwrap();
    let mut cut = full.clone();
    cut.checkpoint_dir = Some(cut_dir.path().to_path_buf());
    cut.max_epochs = 4;
    run_finetune(&cut, &pre, &table).unwrap();
    // epoch 3 is the last durable state; epoch 4 output is discarded on resume
    let from = Checkpoint::load(&checkpoint_path(cut_dir.path(), 3)).unwrap();
    cut.max_epochs = 5;
    let resumed = resume_finetune(&cut, &pre, &from, &table).unwrap();
    assert_eq!(resumed.epochs.first().unwrap().metrics.epoch, 4);

    for f in ["metrics.csv", "rewards.csv", "latest.ckpt", "epoch_0005.ckpt"] {
        let a = std::fs::read(full_dir.path().join(f)).unwrap();
        let b = std::fs::read(cut_dir.path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }

    let mut changed = cut.clone();
    changed.epsilon = 0.3;
    assert!(matches!(resume_finetune(&changed, &pre, &from, &table), Err(Error::Config(_))));
}

#[test]
fn mismatched_schedule_is_rejected() {
    let mut cfg = tiny_config();
    cfg.steps = STEPS + 1;
    assert!(matches!(run_finetune(&cfg, &tiny_checkpoint(), &table()), Err(Error::Config(_))));
}
