// The sampler / reward-worker pipeline: bounded queue, keyed results, and a
// failing worker isolated to a penalty.

use std::time::Duration;

use rlpf::pipeline::{reward_pipeline, PipelineConfig};
use rlpf::reward::{RewardKind, RewardRecord};
use rlpf::Result;

pub fn run_example() -> Result<Vec<RewardRecord>> {
    let mut previous: Option<Vec<RewardRecord>> = None;
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for workers in [1, 4, 8] {
        let out = reward_pipeline(
            32,
            |i| Ok(i as f64 * 0.1),
            |i, x| {
                std::thread::sleep(Duration::from_millis(1));
                if i == 7 {
                    panic!("worker failure");
                }
                RewardRecord { value: -x, kind: RewardKind::Force, penalty: false, raw_rmsd: Some(*x) }
            },
            RewardKind::Force,
            PipelineConfig { samplers: 2, workers, capacity: 4 },
        )?;
        let penalties = out.rewards.iter().filter(|r| r.penalty).count();
        println!("workers {workers}: max queue {} of 4, {penalties} penalty", out.max_queue_len);
        if let Some(p) = &previous {
            assert_eq!(p, &out.rewards);
        }
        previous = Some(out.rewards);
    }
    std::panic::set_hook(hook);
    Ok(previous.unwrap())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
