//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 3 9`.

use std::panic;
use std::time::{Duration, Instant};

use statrs::function::gamma::gamma;
use xigen::ewens::{ewens_distribution, k_marginal_stirling};
use xigen::experiments::{
    ewens_tv_distance, martingale_diagnostic, martingale_exact_mean, run_experiment, run_experiment_range,
    theorem_check, CheckStatus, ExperimentSpec, MeasureInput, Statistic, TheoremCheck,
};
use xigen::simulator::{replay, Event};
use xigen::speed::SpeedSolver;
use xigen::statistics::{alleles_partition, sites_families, trajectories};
use xigen::{CoalescentMeasure, MeasureDescription};

// criterion 1
const EWENS_NORM_TOL: f64 = 1e-10;
const EWENS_STIRLING_REL_TOL: f64 = 1e-9;
const EWENS_RUNTIME: Duration = Duration::from_secs(1);
// criterion 2
const TV_REPLICATES: u64 = 200_000;
const TV_MAX: f64 = 0.01;
const TV_RUNTIME: Duration = Duration::from_secs(60);
// criterion 3
const KINGMAN_REL_TOL: f64 = 1e-6;
// criterion 4
const LENGTH_REPLICATES: u64 = 10_000;
const LENGTH_BAND: f64 = 0.02;
const LENGTH_RUNTIME: Duration = Duration::from_secs(120);
// criterion 5
const T3_REPLICATES: u64 = 500;
const T3_BAND: f64 = 0.25;
const T3_OPEN_SHARE_FLOOR: f64 = 0.9;
const T3_RUNTIME: Duration = Duration::from_secs(15 * 60);
// criterion 6
const C7_REPLICATES: u64 = 500;
const C7_BAND_R1: f64 = 0.25;
const C7_BAND_R2: f64 = 0.30;
// criterion 7
const P2_REPLICATES: u64 = 500;
const P2_CONSTANT: f64 = 8.0;
const P2_MAX_FREQUENCY: f64 = 0.1;
// criterion 8
const DIRAC_REPLICATES: u64 = 400;
const DIRAC_SIGMAS: f64 = 3.0;
// criterion 10
const BS_RATIO_BAND: (f64, f64) = (0.85, 1.15);
const MARTINGALE_REPLICATES: u64 = 10_000;
const MARTINGALE_SIGMAS: f64 = 3.0;

const SEED: u64 = 20_240_601;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn beta15() -> MeasureInput {
    MeasureInput::Shorthand("beta:1.5".into())
}

fn ewens_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst_norm: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for n in 1..=12 {
        for g in [0.1, 0.5, 1.0, 2.0] {
            let d = ewens_distribution(n, g).map_err(|e| e.to_string())?;
            let total: f64 = d.pmf.iter().map(|(_, p)| p).sum();
            worst_norm = worst_norm.max((total - 1.0).abs());
            let oracle = k_marginal_stirling(n, g).map_err(|e| e.to_string())?;
            for (a, b) in d.k_marginal.iter().zip(&oracle) {
                worst_rel = worst_rel.max((a / b - 1.0).abs());
            }
        }
    }
    let took = start.elapsed();
    check(
        worst_norm <= EWENS_NORM_TOL && worst_rel <= EWENS_STIRLING_REL_TOL && took < EWENS_RUNTIME,
        format!("max |sum-1| = {worst_norm:.2e}, max K rel err = {worst_rel:.2e}, {took:.2?}"),
    )
}

fn simulator_ewens() -> Outcome {
    let start = Instant::now();
    let mut spec = ExperimentSpec::new(MeasureInput::Shorthand("kingman".into()), vec![8], 0.5, TV_REPLICATES);
    spec.master_seed = SEED;
    spec.stop = "tau-star".parse().unwrap();
    spec.statistics = vec![Statistic::AlleleConfiguration];
    let result = run_experiment(&spec).map_err(|e| e.to_string())?;
    let tv = ewens_tv_distance(&result, 8, 0.5).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    check(
        tv <= TV_MAX && took < TV_RUNTIME,
        format!("TV = {tv:.5} over {TV_REPLICATES} replicates, {took:.2?}"),
    )
}

fn kingman_closed_forms() -> Outcome {
    let m = CoalescentMeasure::kingman();
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for n in [10u64, 100, 1_000, 10_000] {
        let solver = SpeedSolver::for_measure(&m, n).map_err(|e| e.to_string())?;
        let nf = n as f64;
        let ell = solver.ell(None).map_err(|e| e.to_string())?;
        worst = worst.max((ell / (2.0 * nf.ln()) - 1.0).abs());
        for t in [0.001, 0.01, 0.1, 0.5, 1.5] {
            let v = solver.v_of_t(t).map_err(|e| e.to_string())?;
            worst = worst.max((v / (2.0 * nf / (2.0 + nf * t)) - 1.0).abs());
            points += 1;
        }
    }
    check(
        worst <= KINGMAN_REL_TOL,
        format!("max rel err {worst:.2e} over {points} v^n points and 4 ell(n) values"),
    )
}

fn kingman_length() -> Outcome {
    let start = Instant::now();
    let n = 1_000u32;
    let g = 0.5;
    let mut spec = ExperimentSpec::new(MeasureInput::Shorthand("kingman".into()), vec![n], g, LENGTH_REPLICATES);
    spec.master_seed = SEED;
    spec.statistics = vec![Statistic::Mutations];
    let result = run_experiment(&spec).map_err(|e| e.to_string())?;
    let harmonic: f64 = (1..n).map(|k| 1.0 / k as f64).sum();
    let s = result.summary(n, Statistic::Mutations).unwrap();
    let ratio = s.mean / (2.0 * g * harmonic);
    let took = start.elapsed();
    check(
        (ratio - 1.0).abs() <= LENGTH_BAND && took < LENGTH_RUNTIME,
        format!(
            "mean M/(2 gamma H_(n-1)) = {ratio:.4} (stderr {:.4}), {took:.2?}",
            s.stderr / (2.0 * g * harmonic)
        ),
    )
}

fn family_counts() -> Outcome {
    let start = Instant::now();
    let mut spec = ExperimentSpec::new(beta15(), vec![100, 1_000, 10_000], 1.0, T3_REPLICATES);
    spec.master_seed = SEED;
    spec.tolerances.insert("t3_band".into(), T3_BAND);
    spec.tolerances.insert("t3_open_share_floor".into(), T3_OPEN_SHARE_FLOOR);
    let v = theorem_check(&spec, TheoremCheck::T3FamilyCounts).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let lines: Vec<String> = v
        .lines
        .iter()
        .map(|l| {
            let mark = if l.status == CheckStatus::Fail { " FAILED" } else { "" };
            format!("{} = {:.4} ({}){mark}", l.name, l.estimate, l.bound)
        })
        .chain(v.notes.iter().cloned())
        .collect();
    check(
        v.passed() && took < T3_RUNTIME,
        format!("{}; {took:.2?}", lines.join("; ")),
    )
}

fn spectrum() -> Outcome {
    let mut spec = ExperimentSpec::new(beta15(), vec![10_000], 1.0, C7_REPLICATES);
    spec.master_seed = SEED;
    spec.tolerances.insert("c7_beta".into(), 0.5);
    spec.tolerances.insert("c7_r_max".into(), 2.0);
    spec.tolerances.insert("c7_band_r1".into(), C7_BAND_R1);
    spec.tolerances.insert("c7_band_r2".into(), C7_BAND_R2);
    let v = theorem_check(&spec, TheoremCheck::C7Spectrum).map_err(|e| e.to_string())?;
    let expected = [0.5 * gamma(0.5), 0.5 * gamma(1.5) / 2.0];
    let mut parts = Vec::new();
    for (l, e) in v.lines.iter().zip(expected) {
        parts.push(format!("{} = {:.4} vs {e:.4}", l.name, l.estimate));
    }
    parts.extend(v.notes.iter().cloned());
    check(v.passed(), parts.join("; "))
}

fn envelope() -> Outcome {
    let mut spec = ExperimentSpec::new(beta15(), vec![10_000], 1.0, P2_REPLICATES);
    spec.master_seed = SEED;
    spec.t_grid = Some(vec![1e-4, 1e-3]);
    spec.tolerances.insert("p2_constant".into(), P2_CONSTANT);
    spec.tolerances.insert("p2_max_frequency".into(), P2_MAX_FREQUENCY);
    let v = theorem_check(&spec, TheoremCheck::P2SpeedEnvelope).map_err(|e| e.to_string())?;
    let mut parts: Vec<String> = v
        .lines
        .iter()
        .map(|l| format!("{} = {:.4} ({})", l.name, l.estimate, l.bound))
        .collect();
    for s in [1e-4, 1e-3] {
        let sum = v.result.summary(10_000, Statistic::OpenDeficitSup(s)).unwrap();
        parts.push(format!("median sup at s={s}: {:.4}", sum.median));
    }
    check(v.passed(), parts.join("; "))
}

fn dirac() -> Outcome {
    let n = 10_000u32;
    let t = 0.1;
    let desc = MeasureDescription::from_shorthand("lambda-atom:0.5").unwrap();
    let mut spec = ExperimentSpec::new(MeasureInput::Description(desc), vec![n], 1.0, DIRAC_REPLICATES);
    spec.master_seed = SEED;
    spec.statistics = vec![Statistic::NoMergerBy(t), Statistic::OpenFraction(t)];
    let result = run_experiment(&spec).map_err(|e| e.to_string())?;
    let quiet = result.cell(n, Statistic::NoMergerBy(t)).unwrap();
    let fractions = result.cell(n, Statistic::OpenFraction(t)).unwrap();
    let kept: Vec<f64> = quiet
        .values
        .iter()
        .filter(|(_, &q)| q == 1.0)
        .map(|(i, _)| fractions.values[i])
        .collect();
    if kept.is_empty() {
        return Err("no replicate free of mergers before t".into());
    }
    let p = (-t).exp();
    let tol = DIRAC_SIGMAS * (p * (1.0 - p) / n as f64).sqrt();
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let z = (mean - p) / ((p * (1.0 - p)) / (n as f64 * kept.len() as f64)).sqrt();
    let inside = kept.iter().filter(|&&f| (f - p).abs() <= tol).count();
    check(
        (mean - p).abs() <= tol,
        format!(
            "{} of {DIRAC_REPLICATES} replicates without merger; mean N^o/n = {mean:.5} vs {p:.5} +- {tol:.5}; pooled z = {z:.2}; {inside}/{} replicates individually inside",
            kept.len(),
            kept.len()
        ),
    )
}

fn worked_example() -> Outcome {
    let script = vec![
        Event::mutation(0.3, 8, 1),
        Event::mutation(0.4, 3, 2),
        Event::mutation(0.6, 1, 3),
        Event::mutation(1.0, 7, 4),
        Event::mutation(1.2, 3, 5),
        Event::merger(1.5, vec![1, 2, 3], 10),
        Event::merger(1.5, vec![6, 7, 8, 9], 11),
        Event::mutation(2.1, 4, 6),
        Event::mutation(2.3, 11, 7),
        Event::merger(2.5, vec![4, 5], 12),
        Event::mutation(3.2, 11, 8),
        Event::mutation(3.7, 11, 9),
        Event::merger(4.0, vec![10, 12, 11], 13),
        Event::mutation(5.0, 13, 10),
    ];
    let (t1, t2) = (1.5, 2.5);
    let g = replay(script, 9).map_err(|e| e.to_string())?;
    let tr = trajectories(&g);
    let at = tr.at(t1);
    let counts = (
        at.n,
        at.n_open,
        at.m,
        at.m_open,
        tr.before(t1).n_closed(),
        at.n_closed(),
        tr.before(t2).n_closed(),
    );
    let mut sites: Vec<Vec<u32>> = sites_families(&g).into_iter().map(|f| f.leaves).collect();
    sites.sort();
    let mut expected_sites = vec![
        vec![1],
        vec![3],
        vec![3],
        vec![4],
        vec![7],
        vec![8],
        vec![6, 7, 8, 9],
        vec![6, 7, 8, 9],
        vec![6, 7, 8, 9],
        (1..=9).collect(),
    ];
    expected_sites.sort();
    let alleles: Vec<Vec<u32>> = alleles_partition(&g).into_iter().map(|b| b.leaves).collect();
    let expected_alleles = vec![vec![1], vec![2, 5], vec![3], vec![4], vec![6, 9], vec![7], vec![8]];
    check(
        counts == (4, 4, 5, 4, 4, 0, 2) && sites == expected_sites && alleles == expected_alleles,
        format!(
            "N={} N^o={} M={} M^o={} N^c(t1-)={} N^c(t1)={} N^c(t2-)={}; {} sites families; alleles {:?}",
            counts.0,
            counts.1,
            counts.2,
            counts.3,
            counts.4,
            counts.5,
            counts.6,
            sites.len(),
            alleles
        ),
    )
}

fn bolthausen_sznitman() -> Outcome {
    let m = CoalescentMeasure::bolthausen_sznitman();
    let q: f64 = 1e6;
    let ratio = m.psi(q, 1e-10).map_err(|e| e.to_string())? / (q * q.ln());
    let bs = martingale_diagnostic(&m, 500, 1.0, MARTINGALE_REPLICATES, SEED).map_err(|e| e.to_string())?;
    let k = martingale_diagnostic(&CoalescentMeasure::kingman(), 50, 0.5, MARTINGALE_REPLICATES, SEED)
        .map_err(|e| e.to_string())?;
    let exact = martingale_exact_mean(&m, 500, 1.0).map_err(|e| e.to_string())?;
    check(
        ratio >= BS_RATIO_BAND.0
            && ratio <= BS_RATIO_BAND.1
            && bs.mean.abs() <= MARTINGALE_SIGMAS * bs.stderr
            && k.mean.abs() <= MARTINGALE_SIGMAS * k.stderr,
        format!(
            "psi(1e6)/(q ln q) = {ratio:.4}; BS mean M-bar = {:.5} (stderr {:.5}, forward-equation value {exact:.5}); Kingman mean M-bar = {:.5} (stderr {:.5})",
            bs.mean, bs.stderr, k.mean, k.stderr
        ),
    )
}

fn determinism() -> Outcome {
    let mut spec = ExperimentSpec::new(beta15(), vec![50, 200], 1.0, 64);
    spec.master_seed = SEED;
    spec.stop = "tau-star".parse().unwrap();
    spec.statistics = vec![
        Statistic::Mutations,
        Statistic::OpenMutations,
        Statistic::Length,
        Statistic::SitesSpectrum(1),
        Statistic::AllelesSpectrum(2),
    ];
    let a = run_experiment(&spec).map_err(|e| e.to_string())?;
    let b = run_experiment(&spec).map_err(|e| e.to_string())?;
    let lo = run_experiment_range(&spec, 0..23).map_err(|e| e.to_string())?;
    let hi = run_experiment_range(&spec, 23..64).map_err(|e| e.to_string())?;
    let merged = hi.merge(&lo).map_err(|e| e.to_string())?;
    let same_csv = a.replicates_csv() == b.replicates_csv() && a.summary_csv() == merged.summary_csv();
    check(
        a == b && a == merged && same_csv,
        format!("{} cells, repeat and split (0..23 + 23..64) runs identical", a.cells.len()),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "Ewens exactness", ewens_exactness),
    (2, "simulator matches Ewens", simulator_ewens),
    (3, "Kingman closed forms", kingman_closed_forms),
    (4, "Kingman total-length mean", kingman_length),
    (5, "family counts vs gamma*ell(n)", family_counts),
    (6, "frequency spectrum", spectrum),
    (7, "open-fraction envelope", envelope),
    (8, "Dirac small-time thinning", dirac),
    (9, "nine-leaf worked example replay", worked_example),
    (10, "Bolthausen-Sznitman psi and martingale", bolthausen_sznitman),
    (11, "determinism and merge invariance", determinism),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}) [{took:.1?}]: {detail}"),
            Err(detail) => {
                println!("FAIL criterion {id:>2} ({name}) [{took:.1?}]: {detail}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
