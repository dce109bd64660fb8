// Polynomial and cosine noise schedules: endpoints, SNR and one-step transitions.

use rlpf::{NoiseSchedule, Result, ScheduleKind};

pub fn run_example() -> Result<Vec<(ScheduleKind, f64, f64)>> {
    let mut ends = Vec::new();
    for kind in [ScheduleKind::Polynomial, ScheduleKind::Cosine] {
        let s = NoiseSchedule::new(100, kind)?;
        println!("{kind:?}");
        println!("  t    alpha      sigma      log10 SNR");
        for t in [0, 1, 10, 50, 90, 99, 100] {
            println!("  {t:<4} {:<10.6} {:<10.6} {:+.3}", s.alpha(t), s.sigma(t), s.snr(t).log10());
        }
        let tr = s.transition(50, 49)?;
        println!("  50 -> 49: alpha_t|s {:.6}  sigma_t->s {:.6}", tr.alpha_t_given_r, tr.sigma_t_to_r);
        ends.push((kind, s.alpha(0), s.alpha(100)));
    }
    Ok(ends)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
