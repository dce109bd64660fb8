mod common;

use std::time::Duration;

use common::*;
use rand::Rng;
use rlpf::forcefield::{
    energy_forces, external_forces, external_forces_with_timeout, generate_dataset, generate_dataset_with_topology, minimize,
    BondTopology, DatasetOptions, ForceSource,
};
use rlpf::geometry::{cross, RigidMotion, Vec3};
use rlpf::metrics::{check_molecule, evaluate, infer_bonds};
use rlpf::reward::{force_reward, force_rmsd, ForceEngine};
use rlpf::{Error, Molecule, SeedSpec};

/// Random bonded geometry: atoms along a jittered chain, bonds between
/// neighbours plus the odd extra pair.
fn random_geometry(seed: SeedSpec) -> (Molecule, Vec<(usize, usize)>) {
    let mut rng = seed.rng();
    let n = rng.gen_range(2..=8);
    let mut coords: Vec<Vec3> = Vec::with_capacity(n);
    for i in 0..n {
        let step = [1.2 + rng.gen_range(0.0..0.6), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)];
        coords.push(if i == 0 { [0.0; 3] } else { [coords[i - 1][0] + step[0], coords[i - 1][1] + step[1], coords[i - 1][2] + step[2]] });
    }
    let elements: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let mut bonds: Vec<(usize, usize)> = (1..n).filter(|_| rng.gen_bool(0.8)).map(|i| (i - 1, i)).collect();
    if n > 3 && rng.gen_bool(0.3) {
        bonds.push((0, n - 1));
    }
    (Molecule::from_elements(coords, &elements, 4).unwrap(), bonds)
}

#[test]
fn forces_match_finite_differences_of_the_energy() {
    let t = table();
    let h = 1e-5;
    for case in 0..50u64 {
        let (mol, bonds) = random_geometry(SeedSpec::new(31, case));
        let elements = mol.elements();
        let topo = BondTopology::from_pairs(&mol, &t, &bonds);
        let r = energy_forces(&mol, &topo, &t).unwrap();
        let coords = mol.coords().to_vec();
        let e0 = oracle_energy(&coords, &elements, &bonds, &t);
        assert!((r.energy.unwrap() - e0).abs() <= 1e-12 * e0.abs().max(1.0), "case {case}");

        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..coords.len() {
            for k in 0..3 {
                let mut up = coords.clone();
                up[i][k] += h;
                let mut down = coords.clone();
                down[i][k] -= h;
                let fd = -(oracle_energy(&up, &elements, &bonds, &t) - oracle_energy(&down, &elements, &bonds, &t)) / (2.0 * h);
                worst = worst.max((fd - r.forces[i][k]).abs());
                scale = scale.max(r.forces[i][k].abs());
            }
        }
        assert!(worst / scale.max(1e-3) < 1e-6, "case {case}: {worst:e} vs scale {scale:e}");
    }
}

#[test]
fn net_force_and_torque_vanish() {
    let t = table();
    for case in 0..50u64 {
        let (mol, bonds) = random_geometry(SeedSpec::new(32, case));
        let r = energy_forces(&mol, &BondTopology::from_pairs(&mol, &t, &bonds), &t).unwrap();
        let mut net = [0.0; 3];
        let mut torque = [0.0; 3];
        for (x, f) in mol.coords().iter().zip(&r.forces) {
            let tq = cross(*x, *f);
            for k in 0..3 {
                net[k] += f[k];
                torque[k] += tq[k];
            }
        }
        assert!(net.iter().chain(&torque).all(|v| v.abs() < 1e-10), "case {case}: {net:?} {torque:?}");
    }
}

#[test]
fn energy_invariant_and_forces_rotate() {
    let t = table();
    for case in 0..20u64 {
        let (mol, bonds) = random_geometry(SeedSpec::new(33, case));
        let topo = BondTopology::from_pairs(&mol, &t, &bonds);
        let g = RigidMotion::random(&mut SeedSpec::new(33, 1000 + case).rng(), 2.0);
        let moved = rlpf::geometry::apply_rigid_motion(&mol, &g).unwrap();
        let a = energy_forces(&mol, &topo, &t).unwrap();
        let b = energy_forces(&moved, &topo, &t).unwrap();
        assert!((a.energy.unwrap() - b.energy.unwrap()).abs() < 1e-10);
        for (fa, fb) in a.forces.iter().zip(&b.forces) {
            let r = rotate(&g.rotation, *fa);
            for k in 0..3 {
                assert!((r[k] - fb[k]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn rmsd_matches_brute_force() {
    let t = table();
    for case in 0..50u64 {
        let (mol, bonds) = random_geometry(SeedSpec::new(34, case));
        let r = energy_forces(&mol, &BondTopology::from_pairs(&mol, &t, &bonds), &t).unwrap();
        let n = mol.n_atoms();
        let mut sum = 0.0;
        for f in &r.forces {
            sum += f[0] * f[0] + f[1] * f[1] + f[2] * f[2];
        }
        let brute = (sum / (3 * n) as f64).sqrt();
        assert_eq!(force_rmsd(&r, n).unwrap(), brute, "case {case}");
    }
}

#[test]
fn minimizer_reaches_the_analytic_bond_length() {
    let t = table();
    let mol = Molecule::from_elements(vec![[-0.92, 0.0, 0.0], [0.92, 0.0, 0.0]], &[1, 1], 4).unwrap();
    let topo = BondTopology::from_pairs(&mol, &t, &[(0, 1)]);
    let r = minimize(&mol, &topo, &t, 10_000, 1e-6).unwrap();
    assert!(r.converged);
    assert!(r.rms_force <= 1e-6);
    let c = r.molecule.coords();
    let d = ((c[0][0] - c[1][0]).powi(2) + (c[0][1] - c[1][1]).powi(2) + (c[0][2] - c[1][2]).powi(2)).sqrt();
    assert!((d - t.pair(1, 1).r0).abs() < 1e-3);
}

#[test]
fn dataset_is_at_equilibrium_and_consistent() {
    let t = table();
    let entries = generate_dataset_with_topology(128, (3, 7), &t, SeedSpec::new(35, 0), DatasetOptions::default()).unwrap();
    let mols: Vec<Molecule> = entries.iter().map(|e| e.molecule.clone()).collect();
    let mut matching = 0;
    for e in &entries {
        let n = e.molecule.n_atoms();
        assert!((3..=7).contains(&n));
        let rec = energy_forces(&e.molecule, &e.topology, &t).unwrap();
        assert!(force_rmsd(&rec, n).unwrap() <= 1e-3);
        assert!(check_molecule(&e.molecule, &t).stable);
        assert!(force_reward(&e.molecule, &t, &ForceEngine::Surrogate).value >= -1e-3);
        if infer_bonds(&e.molecule, &t).edges() == e.topology.pairs() {
            matching += 1;
        }
    }
    assert!(matching as f64 >= 0.99 * entries.len() as f64);
    let rep = evaluate(&mols, &t, &Default::default()).unwrap();
    assert!(rep.molecule_stability >= 0.99);
}

#[test]
fn dataset_is_reproducible() {
    let t = table();
    let a = generate_dataset(512, (3, 7), &t, SeedSpec::new(36, 0)).unwrap();
    let b = generate_dataset(512, (3, 7), &t, SeedSpec::new(36, 0)).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(4, (3, 7), &t, SeedSpec::new(37, 0)).unwrap();
    assert_ne!(&a[..4], &c[..]);
}

fn water_like() -> Molecule {
    Molecule::from_elements(vec![[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]], &[3, 0, 0], 4).unwrap()
}

#[test]
fn external_engine_zero_forces() {
    let t = table();
    let r = external_forces(&water_like(), &t, "cat > /dev/null; printf '0 0 0\\n0 0 0\\n0 0 0\\n'").unwrap();
    assert!(r.converged);
    assert_eq!(r.source, ForceSource::External);
    assert!(r.forces.iter().all(|f| *f == [0.0; 3]));
    assert_eq!(r.energy, None);
}

#[test]
fn external_engine_reads_the_xyz_it_is_sent() {
    let t = table();
    // Echo each atom's x coordinate back as its force.
    let r = external_forces(&water_like(), &t, "tail -n +3 | awk '{print $2, 0, 0}'").unwrap();
    assert!((r.forces[1][0] - 0.96).abs() < 1e-9);
    assert!((r.forces[2][0] + 0.24).abs() < 1e-9);
}

#[test]
fn external_engine_failures_are_penalties() {
    let t = table();
    let m = water_like();
    let exit = external_forces(&m, &t, "exit 1").unwrap_err();
    assert!(matches!(exit, Error::EngineFailure { penalty: true, .. }));
    let short = external_forces(&m, &t, "printf '0 0 0\\n0 0 0\\n'").unwrap_err();
    assert!(matches!(short, Error::EngineFailure { penalty: true, .. }));
    let garbage = external_forces(&m, &t, "printf '0 0 x\\n0 0 0\\n0 0 0\\n'").unwrap_err();
    assert!(garbage.is_penalty());
    let nan = external_forces(&m, &t, "printf 'nan 0 0\\n0 0 0\\n0 0 0\\n'").unwrap_err();
    assert!(nan.is_penalty());
    let slow = external_forces_with_timeout(&m, &t, "sleep 5", Duration::from_millis(200)).unwrap_err();
    assert!(matches!(slow, Error::EngineTimeout { penalty: true, .. }));
    let rec = force_reward(&m, &t, &ForceEngine::External("exit 3".into()));
    assert!(rec.penalty);
    assert_eq!(rec.value, -5.0);
}
