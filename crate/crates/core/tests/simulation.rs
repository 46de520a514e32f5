//! Distributional checks of the simulator and structural invariants of the
//! genealogies it produces.

use std::collections::BTreeSet;

use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete, DiscreteCDF};
use xigen::experiments::replicate_seed;
use xigen::simulator::{EventKind, MarkedGenealogy, Simulator, StopRule};
use xigen::statistics::{alleles_partition, sites_families, trajectories};
use xigen::CoalescentMeasure;

fn first_merger(g: &MarkedGenealogy) -> Option<f64> {
    g.events()
        .iter()
        .find(|e| matches!(e.kind, EventKind::Merger { .. }))
        .map(|e| e.t)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn kingman_first_holding_time_is_exponential() {
    // 5 blocks merge at rate C(5,2) = 10
    let sim = Simulator::new(&CoalescentMeasure::kingman(), 5, 0.0, StopRule::UntilTau).unwrap();
    let reps = 10_000;
    let mut xs: Vec<f64> = (0..reps)
        .map(|i| first_merger(&sim.run(replicate_seed(11, 5, i)).unwrap()).unwrap())
        .collect();
    xs.sort_by(f64::total_cmp);
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-10.0 * x).exp();
            (f - i as f64 / reps as f64).max((i + 1) as f64 / reps as f64 - f)
        })
        .fold(0.0, f64::max);
    // asymptotic KS critical value at level 0.001
    assert!(d * (reps as f64).sqrt() < 1.95, "KS D = {d}");
}

#[test]
fn kingman_pair_tau_mean() {
    let sim = Simulator::new(&CoalescentMeasure::kingman(), 2, 0.0, StopRule::UntilTau).unwrap();
    let xs: Vec<f64> = (0..100_000)
        .map(|i| sim.run(replicate_seed(12, 2, i)).unwrap().tau().unwrap())
        .collect();
    assert!((mean(&xs) - 1.0).abs() < 0.02, "{}", mean(&xs));
}

#[test]
fn single_lineage_tau_star_mean() {
    let sim =
        Simulator::new(&CoalescentMeasure::kingman(), 1, 1.0, StopRule::UntilTauStar).unwrap();
    let xs: Vec<f64> = (0..400_000)
        .map(|i| sim.run(replicate_seed(13, 1, i)).unwrap().tau_star().unwrap())
        .collect();
    assert!((mean(&xs) - 1.0).abs() < 0.01, "{}", mean(&xs));
}

#[test]
fn dirac_thinning_is_binomial() {
    // Λ = δ_{1/2}: before the first merger each lineage closes independently
    // by time t with probability 1 - e^{-γt}.
    let (n, gamma, t) = (20u32, 2.0, 0.3);
    let m = CoalescentMeasure::lambda_atoms(&[(0.5, 1.0)]).unwrap();
    let sim = Simulator::new(&m, n, gamma, StopRule::UntilTime(t)).unwrap();
    let mut counts = vec![0u64; n as usize + 1];
    for i in 0..20_000 {
        let g = sim.run(replicate_seed(14, n, i)).unwrap();
        if first_merger(&g).is_some_and(|s| s <= t) {
            continue;
        }
        counts[trajectories(&g).at(t).n_closed() as usize] += 1;
    }
    let total: u64 = counts.iter().sum();
    assert!(total > 4000, "{total} qualifying runs");
    let binom = Binomial::new(1.0 - (-gamma * t).exp(), n as u64).unwrap();
    // pool cells with expectation below 5 into their neighbours
    let mut chi2 = 0.0;
    let mut bins = 0;
    let (mut obs, mut exp) = (0.0, 0.0);
    for (k, &c) in counts.iter().enumerate() {
        obs += c as f64;
        exp += total as f64 * binom.pmf(k as u64);
        if exp >= 5.0 && total as f64 * (1.0 - binom.cdf(k as u64)) >= 5.0 {
            chi2 += (obs - exp).powi(2) / exp;
            bins += 1;
            obs = 0.0;
            exp = 0.0;
        }
    }
    chi2 += (obs - exp).powi(2) / exp;
    bins += 1;
    let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} on {bins} bins, critical {crit}");
}

fn check_invariants(g: &MarkedGenealogy) {
    let n = g.n();
    let tr = trajectories(g);
    for p in tr.points() {
        assert!(p.n_open <= p.n && p.m_open <= p.m);
        assert_eq!(p.n_closed() + p.n_open, p.n);
        let blocks = g.leaf_partition_at(p.t);
        assert_eq!(blocks.len() as u32, tr.at(p.t).n);
        let mut seen: Vec<u32> = blocks.concat();
        seen.sort_unstable();
        assert_eq!(seen, (1..=n).collect::<Vec<_>>());
    }
    // sites families form a laminar family
    let fams: Vec<BTreeSet<u32>> = sites_families(g)
        .into_iter()
        .map(|f| f.leaves.into_iter().collect())
        .collect();
    for a in &fams {
        for b in &fams {
            assert!(a.is_disjoint(b) || a.is_subset(b) || b.is_subset(a));
        }
    }
    // allele blocks partition the leaves
    let mut leaves: Vec<u32> = alleles_partition(g).into_iter().flat_map(|b| b.leaves).collect();
    leaves.sort_unstable();
    assert_eq!(leaves, (1..=n).collect::<Vec<_>>());
}

#[test]
fn genealogy_invariants() {
    let measures = [
        CoalescentMeasure::kingman(),
        CoalescentMeasure::bolthausen_sznitman(),
        CoalescentMeasure::beta(1.3).unwrap(),
        CoalescentMeasure::lambda_atoms(&[(0.5, 1.0)]).unwrap(),
    ];
    for (j, m) in measures.iter().enumerate() {
        for stop in [StopRule::UntilTau, StopRule::UntilTime(0.2), StopRule::UntilBlocks(5)] {
            let sim = Simulator::new(m, 30, 1.5, stop).unwrap();
            for i in 0..20 {
                check_invariants(&sim.run(replicate_seed(15 + j as u64, 30, i)).unwrap());
            }
        }
    }
}

#[test]
fn same_seed_same_genealogy() {
    let sim =
        Simulator::new(&CoalescentMeasure::beta(1.5).unwrap(), 50, 1.0, StopRule::UntilTau).unwrap();
    assert_eq!(sim.run(7).unwrap(), sim.run(7).unwrap());
    assert_ne!(sim.run(7).unwrap().events(), sim.run(8).unwrap().events());
}
