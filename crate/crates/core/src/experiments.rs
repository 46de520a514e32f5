//! Replicated simulation runs, aggregation, and the limit-theorem checks.
//!
//! Every replicate has its own RNG stream seeded by
//! [`replicate_seed`]`(master_seed, n, index)`, and results are stored per
//! replicate index, so partial runs over disjoint index ranges merge into
//! exactly the result of one monolithic run.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ewens::{configurations, ewens_distribution, AlleleConfiguration};
use crate::measures::{CoalescentMeasure, MeasureDescription, PsiEvaluator};
use crate::simulator::{MarkedGenealogy, Simulator, StopRule};
use crate::speed::{comes_down_check, Cdi, SpeedSolver};
use crate::statistics::{allelic_types, spectrum_counts, trajectories, predicted_spectrum};

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replicate `index` at sample size `n`.
pub fn replicate_seed(master: u64, n: u32, index: u64) -> u64 {
    mix(mix(mix(master) ^ n as u64) ^ index)
}

/// A scalar computed from one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    Mutations,
    OpenMutations,
    ClosedMutations,
    Blocks,
    OpenBlocks,
    /// L at the end of the run.
    Length,
    Tau,
    TauStar,
    /// M / (γ ℓ), with ℓ = ℓ(n) or ℓ_t(n) for time-limited runs.
    MutationsOverGammaEll,
    OpenMutationsOverGammaEll,
    /// M^o / M
    OpenShare,
    AlleleFamilies,
    /// Rank of the allele configuration among all configurations of `n`.
    AlleleConfiguration,
    SitesSpectrum(u32),
    AllelesSpectrum(u32),
    /// M^c(t) / (γ L(t))
    ClosedOverLength(f64),
    /// M^c(t) / M(t), 0 when M(t) = 0.
    ClosedShare(f64),
    /// sup_{u ≤ s} |1 − N^o(u)/N(u)|
    OpenDeficitSup(f64),
    /// N^o(t) / n
    OpenFraction(f64),
    /// 1 if no merger happened up to t.
    NoMergerBy(f64),
}

impl Statistic {
    fn needs_ell(&self) -> bool {
        matches!(
            self,
            Statistic::MutationsOverGammaEll | Statistic::OpenMutationsOverGammaEll
        )
    }

    fn needs_gamma(&self) -> bool {
        self.needs_ell() || matches!(self, Statistic::ClosedOverLength(_))
    }

    /// Latest time the statistic looks at, for time-limited runs.
    fn horizon(&self) -> Option<f64> {
        match *self {
            Statistic::ClosedOverLength(t)
            | Statistic::ClosedShare(t)
            | Statistic::OpenDeficitSup(t)
            | Statistic::OpenFraction(t)
            | Statistic::NoMergerBy(t) => Some(t),
            _ => None,
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Mutations => write!(f, "mutations"),
            Statistic::OpenMutations => write!(f, "open_mutations"),
            Statistic::ClosedMutations => write!(f, "closed_mutations"),
            Statistic::Blocks => write!(f, "blocks"),
            Statistic::OpenBlocks => write!(f, "open_blocks"),
            Statistic::Length => write!(f, "length"),
            Statistic::Tau => write!(f, "tau"),
            Statistic::TauStar => write!(f, "tau_star"),
            Statistic::MutationsOverGammaEll => write!(f, "mutations_over_gamma_ell"),
            Statistic::OpenMutationsOverGammaEll => write!(f, "open_mutations_over_gamma_ell"),
            Statistic::OpenShare => write!(f, "open_share"),
            Statistic::AlleleFamilies => write!(f, "allele_families"),
            Statistic::AlleleConfiguration => write!(f, "allele_configuration"),
            Statistic::SitesSpectrum(r) => write!(f, "sites_spectrum:{r}"),
            Statistic::AllelesSpectrum(r) => write!(f, "alleles_spectrum:{r}"),
            Statistic::ClosedOverLength(t) => write!(f, "closed_over_length@{t}"),
            Statistic::ClosedShare(t) => write!(f, "closed_share@{t}"),
            Statistic::OpenDeficitSup(s) => write!(f, "open_deficit_sup@{s}"),
            Statistic::OpenFraction(t) => write!(f, "open_fraction@{t}"),
            Statistic::NoMergerBy(t) => write!(f, "no_merger_by@{t}"),
        }
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown statistic `{s}`"));
        if let Some((name, r)) = s.split_once(':') {
            let r: u32 = r.parse().map_err(|_| bad())?;
            if r == 0 {
                return Err(bad());
            }
            return match name {
                "sites_spectrum" => Ok(Statistic::SitesSpectrum(r)),
                "alleles_spectrum" => Ok(Statistic::AllelesSpectrum(r)),
                _ => Err(bad()),
            };
        }
        if let Some((name, t)) = s.split_once('@') {
            let t: f64 = t.parse().map_err(|_| bad())?;
            if !(t > 0.0 && t.is_finite()) {
                return Err(bad());
            }
            return match name {
                "closed_over_length" => Ok(Statistic::ClosedOverLength(t)),
                "closed_share" => Ok(Statistic::ClosedShare(t)),
                "open_deficit_sup" => Ok(Statistic::OpenDeficitSup(t)),
                "open_fraction" => Ok(Statistic::OpenFraction(t)),
                "no_merger_by" => Ok(Statistic::NoMergerBy(t)),
                _ => Err(bad()),
            };
        }
        Ok(match s {
            "mutations" => Statistic::Mutations,
            "open_mutations" => Statistic::OpenMutations,
            "closed_mutations" => Statistic::ClosedMutations,
            "blocks" => Statistic::Blocks,
            "open_blocks" => Statistic::OpenBlocks,
            "length" => Statistic::Length,
            "tau" => Statistic::Tau,
            "tau_star" => Statistic::TauStar,
            "mutations_over_gamma_ell" => Statistic::MutationsOverGammaEll,
            "open_mutations_over_gamma_ell" => Statistic::OpenMutationsOverGammaEll,
            "open_share" => Statistic::OpenShare,
            "allele_families" => Statistic::AlleleFamilies,
            "allele_configuration" | "allele_partition_histogram" => {
                Statistic::AlleleConfiguration
            }
            _ => return Err(bad()),
        })
    }
}

impl Serialize for Statistic {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Statistic {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// A measure given either as a shorthand string or as a full description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureInput {
    Shorthand(String),
    Description(MeasureDescription),
}

impl MeasureInput {
    pub fn resolve(&self) -> Result<CoalescentMeasure> {
        let desc = match self {
            MeasureInput::Shorthand(s) => MeasureDescription::from_shorthand(s)?,
            MeasureInput::Description(d) => d.clone(),
        };
        crate::measures::validate_measure(&desc)
    }
}

/// Names accepted in `[tolerances]`, with their defaults.
pub const TOLERANCE_DEFAULTS: [(&str, f64); 12] = [
    ("t1_bound", 0.15),
    ("t1_beta", 0.25),
    ("p2_constant", 8.0),
    ("p2_max_frequency", 0.1),
    ("t3_band", 0.25),
    ("t3_open_share_floor", 0.9),
    ("t4_divergence_floor", 10.0),
    ("c7_band_r1", 0.25),
    ("c7_band_r2", 0.30),
    ("c7_band", 0.30),
    ("c7_r_max", 2.0),
    ("c7_beta", f64::NAN),
];

fn default_stop() -> StopRule {
    StopRule::UntilTau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub measure: MeasureInput,
    pub n_grid: Vec<u32>,
    pub gamma: f64,
    pub replicates: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub statistics: Vec<Statistic>,
    #[serde(default = "default_stop")]
    pub stop: StopRule,
    /// Per-n stopping times; overrides `stop` with `time=t_n`.
    #[serde(default)]
    pub t_sequence: Option<Vec<f64>>,
    /// Observation times for the T1 and P2 checks.
    #[serde(default)]
    pub t_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

impl ExperimentSpec {
    pub fn new(measure: MeasureInput, n_grid: Vec<u32>, gamma: f64, replicates: u64) -> Self {
        ExperimentSpec {
            measure,
            n_grid,
            gamma,
            replicates,
            master_seed: 0,
            statistics: Vec::new(),
            stop: StopRule::UntilTau,
            t_sequence: None,
            t_grid: None,
            tolerances: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn tolerance(&self, name: &str) -> f64 {
        self.tolerances.get(name).copied().unwrap_or_else(|| {
            TOLERANCE_DEFAULTS
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .expect("known tolerance name")
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::ZeroReplicates);
        }
        if self.n_grid.is_empty() || self.n_grid[0] < 1 {
            return Err(Error::Config("n_grid must be nonempty with n >= 1".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_grid must be strictly increasing".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::BadGamma(self.gamma));
        }
        if let Some(ts) = &self.t_sequence {
            if ts.len() != self.n_grid.len() {
                return Err(Error::Config("t_sequence must have one entry per n".into()));
            }
            if ts.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
                return Err(Error::Config("t_sequence entries must be positive".into()));
            }
        }
        if let Some(ts) = &self.t_grid {
            if ts.is_empty() || ts.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
                return Err(Error::Config("t_grid entries must be positive".into()));
            }
        }
        for key in self.tolerances.keys() {
            if !TOLERANCE_DEFAULTS.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("unknown tolerance `{key}`")));
            }
        }
        if self.gamma == 0.0 {
            if let Some(s) = self.statistics.iter().find(|s| s.needs_gamma()) {
                return Err(Error::Config(format!("statistic {s} needs gamma > 0")));
            }
        }
        Ok(())
    }

    fn stop_for(&self, i: usize) -> StopRule {
        match &self.t_sequence {
            Some(ts) => StopRule::UntilTime(ts[i]),
            None => self.stop,
        }
    }
}

/// Summary of the values of one (n, statistic) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub replicates: usize,
    pub mean: f64,
    /// Sample standard deviation over √replicates; NaN with one replicate.
    pub stderr: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let r = values.len();
        let mean = values.iter().sum::<f64>() / r as f64;
        let stderr = if r > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        } else {
            f64::NAN
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            replicates: r,
            mean,
            stderr,
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub n: u32,
    pub statistic: Statistic,
    /// Replicate index → value.
    pub values: BTreeMap<u64, f64>,
}

impl Cell {
    pub fn ordered_values(&self) -> Vec<f64> {
        self.values.values().copied().collect()
    }

    pub fn summary(&self) -> Summary {
        Summary::of(&self.ordered_values())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentResult {
    /// Reference length ℓ(n) (or ℓ_{t_n}(n)) used by normalised statistics.
    pub ell: BTreeMap<u32, f64>,
    pub cells: Vec<Cell>,
}

impl ExperimentResult {
    pub fn cell(&self, n: u32, statistic: Statistic) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.n == n && c.statistic == statistic)
    }

    pub fn summary(&self, n: u32, statistic: Statistic) -> Option<Summary> {
        self.cell(n, statistic).map(Cell::summary)
    }

    /// Union of two results over disjoint (or identical) replicates.
    pub fn merge(&self, other: &ExperimentResult) -> Result<ExperimentResult> {
        let mut out = self.clone();
        for (&n, &e) in &other.ell {
            match out.ell.get(&n) {
                Some(&mine) if mine.to_bits() != e.to_bits() => {
                    return Err(Error::Config(format!("results disagree on ell({n})")));
                }
                _ => {
                    out.ell.insert(n, e);
                }
            }
        }
        for cell in &other.cells {
            let pos = out
                .cells
                .iter()
                .position(|c| c.n == cell.n && c.statistic == cell.statistic);
            let target = match pos {
                Some(i) => &mut out.cells[i],
                None => {
                    out.cells.push(Cell {
                        n: cell.n,
                        statistic: cell.statistic,
                        values: BTreeMap::new(),
                    });
                    out.cells.last_mut().expect("just pushed")
                }
            };
            for (&idx, &v) in &cell.values {
                if let Some(old) = target.values.insert(idx, v) {
                    if old.to_bits() != v.to_bits() {
                        return Err(Error::Config(format!(
                            "replicate {idx} of {} at n={} differs between results",
                            cell.statistic, cell.n
                        )));
                    }
                }
            }
        }
        out.cells.sort_by(|a, b| {
            a.n.cmp(&b.n)
                .then_with(|| a.statistic.to_string().cmp(&b.statistic.to_string()))
        });
        Ok(out)
    }

    /// `n,replicate,statistic,value`
    pub fn replicates_csv(&self) -> String {
        let mut out = String::from("n,replicate,statistic,value\n");
        for c in &self.cells {
            for (idx, v) in &c.values {
                let _ = writeln!(out, "{},{idx},{},{v}", c.n, c.statistic);
            }
        }
        out
    }

    /// `n,statistic,estimate,stderr,replicates,median,q1,q3`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("n,statistic,estimate,stderr,replicates,median,q1,q3\n");
        for c in &self.cells {
            let s = c.summary();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.n, c.statistic, s.mean, s.stderr, s.replicates, s.median, s.q1, s.q3
            );
        }
        out
    }
}

/// Simulation settings shared by every replicate at one `n`.
struct Plan {
    n: u32,
    sim: Simulator,
    ell: Option<f64>,
    stats: Vec<Statistic>,
    /// Configurations of `n` in rank order, when requested.
    ranks: Option<HashMap<AlleleConfiguration, usize>>,
}

fn reference_ell(psi: &Arc<PsiEvaluator>, n: u32, stop: StopRule) -> Result<f64> {
    let solver = SpeedSolver::new(psi.clone(), n as u64)?;
    match stop {
        StopRule::UntilTime(t) => solver.ell(Some(t)),
        _ => solver.ell(None),
    }
}

fn plan_for(spec: &ExperimentSpec, m: &CoalescentMeasure, psi: &Arc<PsiEvaluator>, i: usize) -> Result<Plan> {
    let n = spec.n_grid[i];
    let mut stop = spec.stop_for(i);
    let horizon = spec
        .statistics
        .iter()
        .filter_map(Statistic::horizon)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
    if let (StopRule::UntilTau, Some(t)) = (stop, horizon) {
        // time-indexed statistics only need the run up to their horizon
        stop = StopRule::UntilTime(t);
    }
    let ell = if spec.statistics.iter().any(Statistic::needs_ell) {
        Some(reference_ell(psi, n, stop)?)
    } else {
        None
    };
    let ranks = if spec.statistics.contains(&Statistic::AlleleConfiguration) {
        if n as usize > crate::ewens::MAX_ENUMERATED_N {
            return Err(Error::TooLarge(n as usize));
        }
        Some(
            configurations(n as usize)
                .into_iter()
                .enumerate()
                .map(|(i, a)| (a, i))
                .collect(),
        )
    } else {
        None
    };
    Ok(Plan {
        n,
        sim: Simulator::new(m, n, spec.gamma, stop)?,
        ell,
        stats: spec.statistics.clone(),
        ranks,
    })
}

fn evaluate(plan: &Plan, gamma: f64, g: &MarkedGenealogy) -> Vec<f64> {
    let tr = trajectories(g);
    let last = tr.at(g.end());
    let need_alleles = plan.stats.iter().any(|s| {
        matches!(
            s,
            Statistic::AlleleFamilies | Statistic::AlleleConfiguration | Statistic::AllelesSpectrum(_)
        )
    });
    let need_spectrum = need_alleles
        || plan
            .stats
            .iter()
            .any(|s| matches!(s, Statistic::SitesSpectrum(_)));
    let spectrum = need_spectrum.then(|| spectrum_counts(g));
    let block_sizes = need_alleles.then(|| {
        let mut sizes: HashMap<u32, usize> = HashMap::new();
        for a in allelic_types(g) {
            *sizes.entry(a).or_default() += 1;
        }
        sizes
    });
    plan.stats
        .iter()
        .map(|s| match *s {
            Statistic::Mutations => last.m as f64,
            Statistic::OpenMutations => last.m_open as f64,
            Statistic::ClosedMutations => last.m_closed() as f64,
            Statistic::Blocks => last.n as f64,
            Statistic::OpenBlocks => last.n_open as f64,
            Statistic::Length => last.length,
            Statistic::Tau => g.tau().unwrap_or(f64::NAN),
            Statistic::TauStar => g.tau_star().unwrap_or(f64::NAN),
            Statistic::MutationsOverGammaEll => {
                last.m as f64 / (gamma * plan.ell.expect("planned"))
            }
            Statistic::OpenMutationsOverGammaEll => {
                last.m_open as f64 / (gamma * plan.ell.expect("planned"))
            }
            Statistic::OpenShare => {
                if last.m == 0 {
                    f64::NAN
                } else {
                    last.m_open as f64 / last.m as f64
                }
            }
            Statistic::AlleleFamilies => block_sizes.as_ref().expect("planned").len() as f64,
            Statistic::AlleleConfiguration => {
                let sizes = block_sizes.as_ref().expect("planned");
                let a = AlleleConfiguration::from_block_sizes(plan.n as usize, sizes.values().copied());
                plan.ranks.as_ref().expect("planned")[&a] as f64
            }
            Statistic::SitesSpectrum(r) => spectrum.as_ref().expect("planned").sites_at(r) as f64,
            Statistic::AllelesSpectrum(r) => {
                spectrum.as_ref().expect("planned").alleles_at(r) as f64
            }
            Statistic::ClosedOverLength(t) => {
                let p = tr.at(t);
                p.m_closed() as f64 / (gamma * p.length)
            }
            Statistic::ClosedShare(t) => {
                let p = tr.at(t);
                if p.m == 0 {
                    0.0
                } else {
                    p.m_closed() as f64 / p.m as f64
                }
            }
            Statistic::OpenDeficitSup(s) => tr.open_deficit_sup(s),
            Statistic::OpenFraction(t) => tr.at(t).n_open as f64 / plan.n as f64,
            Statistic::NoMergerBy(t) => (tr.at(t).n == plan.n) as u8 as f64,
        })
        .collect()
}

/// Run replicates `range` of every n in the grid.
pub fn run_experiment_range(spec: &ExperimentSpec, range: Range<u64>) -> Result<ExperimentResult> {
    spec.validate()?;
    if spec.statistics.is_empty() {
        return Err(Error::Config("no statistics requested".into()));
    }
    let m = spec.measure.resolve()?;
    let psi = Arc::new(PsiEvaluator::new(m.clone()));
    let mut result = ExperimentResult::default();
    for i in 0..spec.n_grid.len() {
        let plan = plan_for(spec, &m, &psi, i)?;
        if let Some(e) = plan.ell {
            result.ell.insert(plan.n, e);
        }
        let rows: Vec<Vec<f64>> = range
            .clone()
            .into_par_iter()
            .map(|idx| {
                let g = plan.sim.run(replicate_seed(spec.master_seed, plan.n, idx))?;
                Ok(evaluate(&plan, spec.gamma, &g))
            })
            .collect::<Result<_>>()?;
        for (j, s) in plan.stats.iter().enumerate() {
            let values = range
                .clone()
                .zip(&rows)
                .map(|(idx, row)| (idx, row[j]))
                .collect();
            result.cells.push(Cell {
                n: plan.n,
                statistic: *s,
                values,
            });
        }
    }
    ExperimentResult::default().merge(&result)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    run_experiment_range(spec, 0..spec.replicates)
}

/// Total-variation distance between the simulated allele configurations at
/// `n` and the exact Ewens distribution.
pub fn ewens_tv_distance(result: &ExperimentResult, n: u32, gamma: f64) -> Result<f64> {
    let cell = result
        .cell(n, Statistic::AlleleConfiguration)
        .ok_or_else(|| Error::Config(format!("no allele_configuration data at n={n}")))?;
    let exact = ewens_distribution(n as usize, gamma)?;
    let mut counts = vec![0u64; exact.pmf.len()];
    for &v in cell.values.values() {
        counts[v as usize] += 1;
    }
    let total = cell.values.len() as f64;
    Ok(0.5
        * counts
            .iter()
            .zip(&exact.pmf)
            .map(|(&c, (_, p))| (c as f64 / total - p).abs())
            .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremCheck {
    #[serde(rename = "T1_closed_fraction")]
    T1ClosedFraction,
    #[serde(rename = "P2_speed_envelope")]
    P2SpeedEnvelope,
    #[serde(rename = "T3_family_counts")]
    T3FamilyCounts,
    #[serde(rename = "T4_partial_time")]
    T4PartialTime,
    #[serde(rename = "C7_spectrum")]
    C7Spectrum,
}

impl fmt::Display for TheoremCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TheoremCheck::T1ClosedFraction => "T1_closed_fraction",
            TheoremCheck::P2SpeedEnvelope => "P2_speed_envelope",
            TheoremCheck::T3FamilyCounts => "T3_family_counts",
            TheoremCheck::T4PartialTime => "T4_partial_time",
            TheoremCheck::C7Spectrum => "C7_spectrum",
        })
    }
}

impl FromStr for TheoremCheck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        Ok(match key.split('_').next().unwrap_or("") {
            "t1" => TheoremCheck::T1ClosedFraction,
            "p2" => TheoremCheck::P2SpeedEnvelope,
            "t3" => TheoremCheck::T3FamilyCounts,
            "t4" => TheoremCheck::T4PartialTime,
            "c7" => TheoremCheck::C7Spectrum,
            _ => return Err(Error::Config(format!("unknown check `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

impl CheckStatus {
    fn from_bool(ok: bool) -> Self {
        if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub estimate: f64,
    /// The inequality being checked, in words.
    pub bound: String,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: TheoremCheck,
    pub lines: Vec<CheckLine>,
    /// Informational estimates that are reported but not checked.
    pub notes: Vec<String>,
    pub result: ExperimentResult,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.status != CheckStatus::Fail)
    }

    pub fn report(&self) -> String {
        let mut out = String::from("check,name,estimate,bound,status\n");
        for l in &self.lines {
            let status = match l.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "fail",
                CheckStatus::NotApplicable => "n/a",
            };
            let _ = writeln!(out, "{},{},{},\"{}\",{status}", self.check, l.name, l.estimate, l.bound);
        }
        for note in &self.notes {
            let _ = writeln!(out, "# {note}");
        }
        out
    }
}

fn nonincreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0])
}

fn line(name: impl Into<String>, estimate: f64, bound: impl Into<String>, ok: bool) -> CheckLine {
    CheckLine {
        name: name.into(),
        estimate,
        bound: bound.into(),
        status: CheckStatus::from_bool(ok),
    }
}

fn require_cdi(m: &CoalescentMeasure) -> Result<()> {
    match comes_down_check(m)?.cdi {
        Cdi::Yes => Ok(()),
        _ => Err(Error::CdiRequired),
    }
}

/// Evaluate one of the limit-theorem checks on `spec`'s measure and grid.
/// The statistics and stop rule of `spec` are replaced by the check's own.
pub fn theorem_check(spec: &ExperimentSpec, which: TheoremCheck) -> Result<Verdict> {
    spec.validate()?;
    let m = spec.measure.resolve()?;
    let mut run = spec.clone();
    run.t_sequence = None;
    let mut lines = Vec::new();
    let mut notes = Vec::new();
    let last_n = *spec.n_grid.last().expect("validated");
    let result = match which {
        TheoremCheck::T1ClosedFraction => {
            let grid = spec.t_grid.clone().unwrap_or_else(|| vec![0.001, 0.01, 0.1]);
            if spec.gamma == 0.0 {
                for &t in &grid {
                    lines.push(CheckLine {
                        name: format!("E[M^c/(gamma L)] at t={t}"),
                        estimate: f64::NAN,
                        bound: "gamma = 0: no mutations".into(),
                        status: CheckStatus::NotApplicable,
                    });
                }
                return Ok(Verdict {
                    check: which,
                    lines,
                    notes,
                    result: ExperimentResult::default(),
                });
            }
            let mut grid = grid;
            grid.sort_by(f64::total_cmp);
            run.stop = StopRule::UntilTau;
            run.statistics = grid
                .iter()
                .flat_map(|&t| [Statistic::ClosedOverLength(t), Statistic::ClosedShare(t)])
                .collect();
            let result = run_experiment(&run)?;
            let beta = spec.tolerance("t1_beta");
            let bound = spec.tolerance("t1_bound");
            for &n in &spec.n_grid {
                let means: Vec<f64> = grid
                    .iter()
                    .map(|&t| result.summary(n, Statistic::ClosedOverLength(t)).expect("ran").mean)
                    .collect();
                let tails: Vec<f64> = grid
                    .iter()
                    .map(|&t| {
                        let c = result.cell(n, Statistic::ClosedShare(t)).expect("ran");
                        let hits = c.values.values().filter(|&&v| v >= t.powf(beta)).count();
                        hits as f64 / c.values.len() as f64
                    })
                    .collect();
                for (k, &t) in grid.iter().enumerate() {
                    notes.push(format!(
                        "n={n} t={t}: E[M^c/(gamma L)]={} P(M^c/M >= t^{beta})={}",
                        means[k], tails[k]
                    ));
                }
                // grid is ascending, so "nonincreasing as t decreases" means
                // nondecreasing along the grid
                let rev: Vec<f64> = means.iter().rev().copied().collect();
                lines.push(line(
                    format!("n={n} E[M^c/(gamma L)] monotone in t"),
                    means[0],
                    "nonincreasing as t decreases",
                    nonincreasing(&rev),
                ));
                let rev_tail: Vec<f64> = tails.iter().rev().copied().collect();
                lines.push(line(
                    format!("n={n} P(M^c/M >= t^{beta}) monotone in t"),
                    tails[0],
                    "nonincreasing as t decreases",
                    nonincreasing(&rev_tail),
                ));
                if n == last_n {
                    lines.push(line(
                        format!("n={n} E[M^c/(gamma L)] at t={}", grid[0]),
                        means[0],
                        format!("<= {bound}"),
                        means[0] <= bound,
                    ));
                }
            }
            result
        }
        TheoremCheck::P2SpeedEnvelope => {
            let mut grid = spec.t_grid.clone().unwrap_or_else(|| vec![1e-4, 1e-3]);
            grid.sort_by(f64::total_cmp);
            run.stop = StopRule::UntilTau;
            run.statistics = grid.iter().map(|&s| Statistic::OpenDeficitSup(s)).collect();
            let result = run_experiment(&run)?;
            let c = spec.tolerance("p2_constant");
            let cap = spec.tolerance("p2_max_frequency");
            for &n in &spec.n_grid {
                let freqs: Vec<f64> = grid
                    .iter()
                    .map(|&s| {
                        let cell = result.cell(n, Statistic::OpenDeficitSup(s)).expect("ran");
                        let threshold = c * s.cbrt();
                        cell.values.values().filter(|&&v| v > threshold).count() as f64
                            / cell.values.len() as f64
                    })
                    .collect();
                for (k, &s) in grid.iter().enumerate() {
                    lines.push(line(
                        format!("n={n} P(sup|1-N^o/N| > {c} s^(1/3)) at s={s}"),
                        freqs[k],
                        format!("<= {cap}"),
                        freqs[k] <= cap,
                    ));
                }
                let rev: Vec<f64> = freqs.iter().rev().copied().collect();
                lines.push(line(
                    format!("n={n} exceedance frequency monotone in s"),
                    freqs[0],
                    "nonincreasing as s decreases",
                    nonincreasing(&rev),
                ));
            }
            result
        }
        TheoremCheck::T3FamilyCounts | TheoremCheck::T4PartialTime => {
            require_cdi(&m)?;
            if which == TheoremCheck::T4PartialTime {
                let ts = spec
                    .t_sequence
                    .as_ref()
                    .ok_or_else(|| Error::Config("T4 needs t_sequence".into()))?;
                let floor = spec.tolerance("t4_divergence_floor");
                let psi = Arc::new(PsiEvaluator::new(m.clone()));
                for (&n, &t) in spec.n_grid.iter().zip(ts) {
                    let e = reference_ell(&psi, n, StopRule::UntilTime(t))?;
                    if e <= floor {
                        return Err(Error::BadParameter(format!(
                            "ell_t(n) = {e} at n={n}, t={t} does not exceed the divergence floor {floor}"
                        )));
                    }
                }
                run.t_sequence = spec.t_sequence.clone();
            } else {
                run.stop = StopRule::UntilTau;
            }
            run.statistics = vec![
                Statistic::MutationsOverGammaEll,
                Statistic::OpenMutationsOverGammaEll,
                Statistic::OpenShare,
            ];
            if spec.gamma == 0.0 {
                return Err(Error::BadGamma(0.0));
            }
            let result = run_experiment(&run)?;
            let band = spec.tolerance("t3_band");
            let floor = spec.tolerance("t3_open_share_floor");
            for s in [Statistic::MutationsOverGammaEll, Statistic::OpenMutationsOverGammaEll] {
                let medians: Vec<f64> = spec
                    .n_grid
                    .iter()
                    .map(|&n| result.summary(n, s).expect("ran").median)
                    .collect();
                for (&n, med) in spec.n_grid.iter().zip(&medians) {
                    let sum = result.summary(n, s).expect("ran");
                    notes.push(format!(
                        "n={n} {s}: median={med} iqr={} mean={} stderr={}",
                        sum.iqr(),
                        sum.mean,
                        sum.stderr
                    ));
                }
                let last = *medians.last().expect("nonempty");
                lines.push(line(
                    format!("n={last_n} median {s}"),
                    last,
                    format!("in [{}, {}]", 1.0 - band, 1.0 + band),
                    (last - 1.0).abs() <= band,
                ));
                let dist: Vec<f64> = medians.iter().map(|m| (m - 1.0).abs()).collect();
                lines.push(line(
                    format!("|median {s} - 1| along n_grid"),
                    *dist.last().expect("nonempty"),
                    "nonincreasing in n",
                    nonincreasing(&dist),
                ));
            }
            let share = result.summary(last_n, Statistic::OpenShare).expect("ran");
            lines.push(line(
                format!("n={last_n} median open_share"),
                share.median,
                format!(">= {floor}"),
                share.median >= floor,
            ));
            result
        }
        TheoremCheck::C7Spectrum => {
            require_cdi(&m)?;
            let r_max = spec.tolerance("c7_r_max").max(1.0) as u32;
            run.stop = StopRule::UntilTauStar;
            run.statistics = (1..=r_max).map(Statistic::SitesSpectrum).collect();
            if spec.gamma == 0.0 {
                return Err(Error::GammaZeroWithTauStar);
            }
            let result = run_experiment(&run)?;
            let psi = Arc::new(PsiEvaluator::new(m.clone()));
            let ell = reference_ell(&psi, last_n, StopRule::UntilTau)?;
            let beta_given = spec.tolerance("c7_beta");
            let beta = if beta_given.is_nan() {
                ell.ln() / (last_n as f64).ln()
            } else {
                beta_given
            };
            notes.push(format!("n={last_n} ell(n)={ell} beta={beta}"));
            let mut result = result;
            result.ell.insert(last_n, ell);
            let gamma_one_minus_beta = statrs::function::gamma::gamma(1.0 - beta);
            for r in 1..=r_max {
                let sum = result.summary(last_n, Statistic::SitesSpectrum(r)).expect("ran");
                let estimate = sum.mean / ell;
                let predicted = predicted_spectrum(beta, r, 1.0)?;
                let band = match r {
                    1 => spec.tolerance("c7_band_r1"),
                    2 => spec.tolerance("c7_band_r2"),
                    _ => spec.tolerance("c7_band"),
                };
                lines.push(line(
                    format!("n={last_n} M_{r}/ell(n)"),
                    estimate,
                    format!("within {}% of {predicted}", band * 100.0),
                    (estimate / predicted - 1.0).abs() <= band,
                ));
                notes.push(format!(
                    "n={last_n} r={r}: M_r/(gamma ell)={} (stderr {}), normalised prediction {}",
                    estimate / spec.gamma,
                    sum.stderr / ell / spec.gamma,
                    predicted / gamma_one_minus_beta
                ));
            }
            result
        }
    };
    Ok(Verdict {
        check: which,
        lines,
        notes,
        result,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub replicates: u64,
}

/// Monte Carlo mean of `F(N(t∧τ)) − t∧τ` with `F(b) = Σ_{j=b+1}^{n} 1/ψ̄(j)`.
pub fn martingale_diagnostic(
    m: &CoalescentMeasure,
    n: u32,
    t: f64,
    replicates: u64,
    seed: u64,
) -> Result<MartingaleEstimate> {
    if !m.is_lambda() {
        return Err(Error::BarUnsupported);
    }
    if replicates == 0 {
        return Err(Error::ZeroReplicates);
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::BadParameter(format!("t must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(MartingaleEstimate {
            mean: 0.0,
            stderr: 0.0,
            replicates,
        });
    }
    let psi = PsiEvaluator::new(m.clone());
    // tail[b] = Σ_{j=b+1}^{n} 1/ψ̄(j)
    let mut tail = vec![0.0; n as usize + 1];
    for b in (1..n as usize).rev() {
        tail[b] = tail[b + 1] + 1.0 / psi.bar((b + 1) as f64)?;
    }
    let sim = Simulator::new(m, n, 0.0, StopRule::UntilTime(t))?;
    let values: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|idx| {
            let g = sim.run(replicate_seed(seed, n, idx))?;
            let stopped = g.tau().map_or(t, |tau| tau.min(t));
            let blocks = g.active_at_end().len();
            Ok(tail[blocks] - stopped)
        })
        .collect::<Result<_>>()?;
    let s = Summary::of(&values);
    Ok(MartingaleEstimate {
        mean: s.mean,
        stderr: s.stderr,
        replicates,
    })
}

/// `E[F(N(t∧τ)) − t∧τ]` for the diagnostic above, from the forward equation
/// of the block-counting chain (classical RK4 in time).
pub fn martingale_exact_mean(m: &CoalescentMeasure, n: u32, t: f64) -> Result<f64> {
    if !m.is_lambda() {
        return Err(Error::BarUnsupported);
    }
    let n = n as usize;
    let psi = PsiEvaluator::new(m.clone());
    let mut tail = vec![0.0; n + 1];
    for b in (1..n).rev() {
        tail[b] = tail[b + 1] + 1.0 / psi.bar((b + 1) as f64)?;
    }
    let rates = crate::measures::LambdaRates::new(m, n)?;
    // jump[b][k] = rate of b → b-k+1
    let mut jump: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    for (b, row) in jump.iter_mut().enumerate().skip(2) {
        *row = (0..=b)
            .map(|k| if k >= 2 { rates.weighted(b, k) } else { Ok(0.0) })
            .collect::<Result<_>>()?;
    }
    let lambda_max = (2..=n).map(|b| rates.total(b)).fold(1.0, f64::max);
    let steps = ((t * lambda_max * 2.0).ceil() as usize).max(1);
    let h = t / steps as f64;
    let deriv = |p: &[f64]| -> Vec<f64> {
        let mut d = vec![0.0; n + 1];
        for b in 2..=n {
            if p[b] == 0.0 {
                continue;
            }
            d[b] -= p[b] * rates.total(b);
            for k in 2..=b {
                d[b - k + 1] += p[b] * jump[b][k];
            }
        }
        d
    };
    let mut p = vec![0.0; n + 1];
    p[n] = 1.0;
    // E[t∧τ] = ∫ P(N(s) > 1) ds, trapezoid rule on the RK4 grid
    let alive = |p: &[f64]| 1.0 - p[1];
    let mut stopped = alive(&p);
    for step in 1..=steps {
        let k1 = deriv(&p);
        let y: Vec<f64> = p.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
        let k2 = deriv(&y);
        let y: Vec<f64> = p.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
        let k3 = deriv(&y);
        let y: Vec<f64> = p.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
        let k4 = deriv(&y);
        for j in 0..=n {
            p[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        stopped += if step == steps { alive(&p) } else { 2.0 * alive(&p) };
    }
    let expected_stop = 0.5 * h * stopped;
    let expected_f: f64 = (1..=n).map(|b| p[b] * tail[b]).sum();
    Ok(expected_f - expected_stop)
}
