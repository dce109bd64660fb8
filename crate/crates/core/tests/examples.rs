macro_rules! example {
    ($name:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }
    };
}

example!(noise_schedule, "noise_schedule.rs");
example!(denoiser, "denoiser.rs");
example!(dataset, "dataset.rs");
example!(rewards, "rewards.rs");
example!(pretrain, "pretrain.rs");
example!(sample, "sample.rs");
example!(finetune, "finetune.rs");
example!(rejection, "rejection.rs");
example!(reward_pipeline, "reward_pipeline.rs");

#[test]
fn noise_schedule_endpoints() {
    for (_, a0, a_t) in noise_schedule::run_example().unwrap() {
        assert!(a0 > 0.99999 - 1e-9);
        assert!(a_t <= 1e-2);
    }
}

#[test]
fn denoiser_is_equivariant() {
    let r = denoiser::run_example().unwrap();
    assert!(r.equivariance_error < 1e-10);
    assert!(r.grad_norm > 0.0);
    assert_eq!(r.param_count, rlpf::denoiser::Architecture::new(2, 16, 4).param_count());
}

#[test]
fn dataset_is_stable() {
    let (n, stability) = dataset::run_example().unwrap();
    assert_eq!(n, 32);
    assert!(stability >= 0.99);
}

#[test]
fn rewards_rank_the_molecules() {
    let r = rewards::run_example().unwrap();
    assert!(!r[0].1.penalty);
    assert!((r[1].1.value + (8.0f64 / 6.0).sqrt()).abs() < 1e-12);
    assert!(r[2].1.penalty);
}

#[test]
fn pretraining_reduces_loss() {
    let out = pretrain::run_example().unwrap();
    assert!(out.losses.last().unwrap().heldout_loss < out.losses.first().unwrap().heldout_loss);
}

#[test]
fn sampling_yields_molecules() {
    let mols = sample::run_example().unwrap();
    assert_eq!(mols.len(), 16);
    assert!(mols.iter().all(|m| m.n_atoms() >= 3));
}

#[test]
fn finetuning_runs_three_epochs() {
    let run = finetune::run_example().unwrap();
    assert_eq!(run.epochs.len(), 3);
    assert!(run.epochs.iter().all(|e| e.metrics.kl_to_pretrained.is_finite()));
    assert!(run.epochs[2].metrics.kl_to_pretrained > 0.0);
}

#[test]
fn rejection_collects_the_target() {
    let out = rejection::run_example().unwrap();
    assert_eq!(out.stable.len(), 8);
    assert!(out.total_sampled >= 8);
}

#[test]
fn pipeline_isolates_the_failure() {
    let rewards = reward_pipeline::run_example().unwrap();
    assert!(rewards[7].penalty);
    assert_eq!(rewards.iter().filter(|r| r.penalty).count(), 1);
}
