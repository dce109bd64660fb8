// Force, valency and composite rewards on a few hand-built molecules.

use rlpf::reward::{composite_reward, force_reward, valency_reward, CompositeConfig, ForceEngine, RewardRecord};
use rlpf::{AtomTable, Molecule, Result};

pub fn run_example() -> Result<Vec<(String, RewardRecord)>> {
    let table = AtomTable::organic();
    let r = 1.09 / 3f64.sqrt();
    let methane = Molecule::from_elements(vec![[0.0; 3], [r, r, r], [r, -r, -r], [-r, r, -r], [-r, -r, r]], &[1, 0, 0, 0, 0], 4)?;
    let stretched = Molecule::from_elements(vec![[-0.82, 0.0, 0.0], [0.82, 0.0, 0.0]], &[1, 1], 4)?;
    let collapsed = Molecule::from_elements(vec![[0.0; 3], [0.0; 3], [1.2, 0.0, 0.0]], &[1, 0, 0], 4)?;
    let composite = CompositeConfig::default();
    let mut out = Vec::new();
    for (name, m) in [("methane", &methane), ("stretched C-C", &stretched), ("coincident atoms", &collapsed)] {
        let f = force_reward(m, &table, &ForceEngine::Surrogate);
        let v = valency_reward(m, &table);
        let c = composite_reward(m, &table, &ForceEngine::Surrogate, &composite);
        println!("{name:<18} force {:+.4}{}  valency {:.0}  composite {:+.4}", f.value, if f.penalty { " (penalty)" } else { "" }, v.value, c.value);
        out.push((name.to_string(), f));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
