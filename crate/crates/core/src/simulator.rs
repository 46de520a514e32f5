//! Event-driven simulation of the marked `n`-genealogy.
//!
//! Leaves carry lineage ids `1..=n`; each merger introduces the next id
//! `n+1, n+2, ...`. Mutation ids start at 1 and increase in arrival order.
//!
//! Λ-type measures are simulated on the block count: with `b` lineages the
//! next merger arrives at rate `λ_b = Σ_k C(b,k) λ_{b,k}`, its size `k` is
//! drawn by inverting the CDF upward from `k = 2`, and a uniform `k`-subset
//! of the active lineages merges. Finite Ξ atoms are simulated through the
//! Poisson construction itself: atom `x` fires at rate `w / Σ x_i²` and
//! each lineage takes colour `i` with probability `x_i` (dust otherwise).
//!
//! Within one step the draws are taken in a fixed order: holding time,
//! event type, merger size (or atom), subset, mutation target.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::measures::{CoalescentMeasure, LambdaRates, NontrivialPart};
use crate::unionfind::UnionFind;

pub type LineageId = u32;

/// Events processed before a run is declared non-terminating.
pub const EVENT_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Collapse to a single lineage.
    UntilTau,
    /// First mutation on the single remaining lineage.
    UntilTauStar,
    UntilTime(f64),
    /// First time at most `b` lineages remain.
    UntilBlocks(usize),
}

impl fmt::Display for StopRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopRule::UntilTau => write!(f, "tau"),
            StopRule::UntilTauStar => write!(f, "tau-star"),
            StopRule::UntilTime(t) => write!(f, "time={t}"),
            StopRule::UntilBlocks(b) => write!(f, "blocks={b}"),
        }
    }
}

impl FromStr for StopRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => return Ok(StopRule::UntilTau),
            "tau-star" | "tau_star" => return Ok(StopRule::UntilTauStar),
            _ => {}
        }
        if let Some(v) = s.strip_prefix("time=") {
            let t: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("bad stop time `{v}`")))?;
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("stop time must be >= 0, got {t}")));
            }
            return Ok(StopRule::UntilTime(t));
        }
        if let Some(v) = s.strip_prefix("blocks=") {
            let b: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("bad block count `{v}`")))?;
            if b < 1 {
                return Err(Error::Config("stop block count must be >= 1".into()));
            }
            return Ok(StopRule::UntilBlocks(b));
        }
        Err(Error::Config(format!(
            "unknown stop rule `{s}` (expected tau, tau-star, time=T, blocks=B)"
        )))
    }
}

impl Serialize for StopRule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StopRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Merger {
        participants: Vec<LineageId>,
        new_id: LineageId,
    },
    Mutation {
        lineage: LineageId,
        mutation_id: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Event {
    pub fn merger(t: f64, participants: Vec<LineageId>, new_id: LineageId) -> Self {
        Event {
            t,
            kind: EventKind::Merger {
                participants,
                new_id,
            },
        }
    }

    pub fn mutation(t: f64, lineage: LineageId, mutation_id: u32) -> Self {
        Event {
            t,
            kind: EventKind::Mutation {
                lineage,
                mutation_id,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageRecord {
    pub id: LineageId,
    pub birth: f64,
    /// Time the lineage merged into a parent.
    pub death: Option<f64>,
    /// Index of the parent record.
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Number of leaves below the lineage.
    pub size: u32,
    pub born_open: bool,
    /// Indices into the mutation list, in arrival order.
    pub mutations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationRecord {
    pub id: u32,
    pub t: f64,
    /// Index of the lineage record.
    pub lineage: usize,
    /// Whether the lineage was open when the mark arrived.
    pub open: bool,
}

/// Immutable event log of one run, with the lineage tree derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedGenealogy {
    n: u32,
    gamma: f64,
    seed: Option<u64>,
    stop: Option<StopRule>,
    end: f64,
    events: Vec<Event>,
    tau: Option<f64>,
    tau_star: Option<f64>,
    lineages: Vec<LineageRecord>,
    index: HashMap<LineageId, usize>,
    mutations: Vec<MutationRecord>,
}

/// On-disk form of a genealogy. Times are in coalescent units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenealogyDocument {
    pub n: u32,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub stop: Option<StopRule>,
    #[serde(default)]
    pub end: Option<f64>,
    pub events: Vec<Event>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub tau_star: Option<f64>,
}

impl MarkedGenealogy {
    /// Validate an event list and derive lineage states.
    fn build(
        n: u32,
        events: Vec<Event>,
        gamma: f64,
        seed: Option<u64>,
        stop: Option<StopRule>,
        end: Option<f64>,
    ) -> Result<Self> {
        if n < 1 {
            return Err(Error::BadParameter("genealogy needs n >= 1".into()));
        }
        let mut lineages: Vec<LineageRecord> = (1..=n)
            .map(|id| LineageRecord {
                id,
                birth: 0.0,
                death: None,
                parent: None,
                children: Vec::new(),
                size: 1,
                born_open: true,
                mutations: Vec::new(),
            })
            .collect();
        let mut index: HashMap<LineageId, usize> = (1..=n).map(|id| (id, id as usize - 1)).collect();
        let mut open: Vec<bool> = vec![true; n as usize];
        let mut mutations: Vec<MutationRecord> = Vec::new();
        let mut active = n as usize;
        let mut tau = if n == 1 { Some(0.0) } else { None };
        let mut tau_star = None;
        let mut previous = 0.0f64;

        let lookup = |index: &HashMap<LineageId, usize>, lineages: &[LineageRecord], id: LineageId| {
            let &i = index.get(&id).ok_or(Error::UnknownLineage(id))?;
            if lineages[i].death.is_some() {
                return Err(Error::InactiveLineage(id));
            }
            Ok(i)
        };

        for ev in &events {
            if !(ev.t >= previous) || !ev.t.is_finite() {
                return Err(Error::NonmonotoneTime {
                    time: ev.t,
                    previous,
                });
            }
            previous = ev.t;
            match &ev.kind {
                EventKind::Merger {
                    participants,
                    new_id,
                } => {
                    if participants.len() < 2 {
                        return Err(Error::BadParameter(format!(
                            "merger at t={} needs at least two participants",
                            ev.t
                        )));
                    }
                    if index.contains_key(new_id) || *new_id == 0 {
                        return Err(Error::BadParameter(format!(
                            "merger at t={} reuses lineage id {new_id}",
                            ev.t
                        )));
                    }
                    let me = lineages.len();
                    let mut children = Vec::with_capacity(participants.len());
                    let mut size = 0;
                    let mut any_open = false;
                    for &p in participants {
                        let i = lookup(&index, &lineages, p)?;
                        if children.contains(&i) {
                            return Err(Error::BadParameter(format!(
                                "lineage {p} listed twice in merger at t={}",
                                ev.t
                            )));
                        }
                        children.push(i);
                        size += lineages[i].size;
                        any_open |= open[i];
                    }
                    for &i in &children {
                        lineages[i].death = Some(ev.t);
                        lineages[i].parent = Some(me);
                    }
                    lineages.push(LineageRecord {
                        id: *new_id,
                        birth: ev.t,
                        death: None,
                        parent: None,
                        children,
                        size,
                        born_open: any_open,
                        mutations: Vec::new(),
                    });
                    open.push(any_open);
                    index.insert(*new_id, me);
                    active -= participants.len() - 1;
                    if active == 1 {
                        tau = Some(ev.t);
                    }
                }
                EventKind::Mutation {
                    lineage,
                    mutation_id,
                } => {
                    let i = lookup(&index, &lineages, *lineage)?;
                    let expected = mutations.len() as u32 + 1;
                    if *mutation_id != expected {
                        return Err(Error::BadParameter(format!(
                            "mutation id {mutation_id} out of sequence (expected {expected})"
                        )));
                    }
                    let m = mutations.len();
                    mutations.push(MutationRecord {
                        id: *mutation_id,
                        t: ev.t,
                        lineage: i,
                        open: open[i],
                    });
                    open[i] = false;
                    lineages[i].mutations.push(m);
                    if active == 1 && tau_star.is_none() {
                        tau_star = Some(ev.t);
                    }
                }
            }
        }
        let last = events.last().map_or(0.0, |e| e.t);
        let end = end.unwrap_or(last).max(last);
        Ok(MarkedGenealogy {
            n,
            gamma,
            seed,
            stop,
            end,
            events,
            tau,
            tau_star,
            lineages,
            index,
            mutations,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn stop(&self) -> Option<StopRule> {
        self.stop
    }

    /// End of the observation window.
    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn tau_star(&self) -> Option<f64> {
        self.tau_star
    }

    pub fn lineages(&self) -> &[LineageRecord] {
        &self.lineages
    }

    pub fn mutations(&self) -> &[MutationRecord] {
        &self.mutations
    }

    pub fn lineage(&self, id: LineageId) -> Option<&LineageRecord> {
        self.index.get(&id).map(|&i| &self.lineages[i])
    }

    /// Lineages still active at the end of the log.
    pub fn active_at_end(&self) -> Vec<usize> {
        (0..self.lineages.len())
            .filter(|&i| self.lineages[i].death.is_none())
            .collect()
    }

    /// Whether the lineage record `i` is open at time `t` (after events at `t`).
    pub fn is_open_at(&self, i: usize, t: f64) -> bool {
        let rec = &self.lineages[i];
        rec.born_open
            && rec
                .mutations
                .first()
                .is_none_or(|&m| self.mutations[m].t > t)
    }

    /// Sorted leaf labels below lineage record `i`.
    pub fn leaves(&self, i: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.lineages[i].size as usize);
        let mut stack = vec![i];
        while let Some(j) = stack.pop() {
            let rec = &self.lineages[j];
            if rec.children.is_empty() {
                out.push(rec.id);
            } else {
                stack.extend(rec.children.iter().copied());
            }
        }
        out.sort_unstable();
        out
    }

    /// Leaf sets of the lineages active at time `t` (after events at `t`),
    /// recovered by replaying mergers through a union-find over leaves.
    pub fn leaf_partition_at(&self, t: f64) -> Vec<Vec<u32>> {
        let n = self.n as usize;
        let mut uf = UnionFind::new(n);
        // representative leaf of each lineage record
        let mut rep: Vec<usize> = (0..n).collect();
        rep.resize(self.lineages.len(), usize::MAX);
        let mut next = n;
        for ev in &self.events {
            if ev.t > t {
                break;
            }
            if let EventKind::Merger { participants, .. } = &ev.kind {
                let first = rep[self.index[&participants[0]]];
                for p in &participants[1..] {
                    uf.union(first, rep[self.index[p]]);
                }
                rep[next] = first;
                next += 1;
            }
        }
        let mut blocks: HashMap<usize, Vec<u32>> = HashMap::new();
        for leaf in 0..n {
            blocks.entry(uf.find(leaf)).or_default().push(leaf as u32 + 1);
        }
        let mut out: Vec<Vec<u32>> = blocks.into_values().collect();
        out.sort();
        out
    }

    pub fn to_document(&self) -> GenealogyDocument {
        GenealogyDocument {
            n: self.n,
            gamma: self.gamma,
            seed: self.seed,
            stop: self.stop,
            end: Some(self.end),
            events: self.events.clone(),
            tau: self.tau,
            tau_star: self.tau_star,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("genealogy serializes")
    }

    pub fn from_document(doc: GenealogyDocument) -> Result<Self> {
        let g = Self::build(doc.n, doc.events, doc.gamma, doc.seed, doc.stop, doc.end)?;
        for (name, given, derived) in [("tau", doc.tau, g.tau), ("tau_star", doc.tau_star, g.tau_star)] {
            if given.is_some() && given != derived {
                return Err(Error::BadParameter(format!(
                    "{name} {given:?} disagrees with the event log ({derived:?})"
                )));
            }
        }
        Ok(g)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GenealogyDocument =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_document(doc)
    }
}

/// Build a genealogy from an explicit event script.
pub fn replay(script: Vec<Event>, n: u32) -> Result<MarkedGenealogy> {
    MarkedGenealogy::build(n, script, 0.0, None, None, None)
}

#[derive(Debug)]
enum Engine {
    /// Pure Kingman: every merger is a pair.
    Pairwise,
    Lambda(Arc<LambdaRates>),
    Xi {
        /// Cumulative colour boundaries per atom.
        cumulative: Vec<Vec<f64>>,
        /// Cumulative atom firing rates.
        rate_cdf: Vec<f64>,
        kingman_mass: f64,
    },
}

/// A prepared simulation: rates are computed once and shared by every run.
#[derive(Debug, Clone)]
pub struct Simulator {
    measure: CoalescentMeasure,
    n: u32,
    gamma: f64,
    stop: StopRule,
    engine: Arc<Engine>,
}

impl Simulator {
    pub fn new(m: &CoalescentMeasure, n: u32, gamma: f64, stop: StopRule) -> Result<Self> {
        if n < 1 {
            return Err(Error::BadParameter("simulation needs n >= 1".into()));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::BadParameter(format!("gamma must be >= 0, got {gamma}")));
        }
        if stop == StopRule::UntilTauStar && gamma == 0.0 {
            return Err(Error::GammaZeroWithTauStar);
        }
        if let StopRule::UntilTime(t) = stop {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::BadParameter(format!("stop time {t} invalid")));
            }
        }
        let engine = match m.part() {
            NontrivialPart::None => Engine::Pairwise,
            NontrivialPart::XiAtoms(atoms) => {
                let mut cumulative = Vec::with_capacity(atoms.len());
                let mut rate_cdf = Vec::with_capacity(atoms.len());
                let mut acc = 0.0;
                for a in atoms {
                    let mut c = 0.0;
                    cumulative.push(
                        a.point
                            .coords()
                            .iter()
                            .map(|x| {
                                c += x;
                                c
                            })
                            .collect(),
                    );
                    acc += a.weight / a.point.sum_sq();
                    rate_cdf.push(acc);
                }
                Engine::Xi {
                    cumulative,
                    rate_cdf,
                    kingman_mass: m.kingman_mass(),
                }
            }
            _ => Engine::Lambda(Arc::new(LambdaRates::new(m, n as usize)?)),
        };
        Ok(Simulator {
            measure: m.clone(),
            n,
            gamma,
            stop,
            engine: Arc::new(engine),
        })
    }

    pub fn measure(&self) -> &CoalescentMeasure {
        &self.measure
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn stop(&self) -> StopRule {
        self.stop
    }

    pub fn run(&self, seed: u64) -> Result<MarkedGenealogy> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n as usize;
        let mut active: Vec<LineageId> = (1..=self.n).collect();
        let mut next_id = self.n + 1;
        let mut next_mutation = 1u32;
        let mut events: Vec<Event> = Vec::new();
        let mut t = 0.0f64;
        let mut after_tau = n == 1;
        let mut count: u64 = 0;
        let end;

        loop {
            let b = active.len();
            match self.stop {
                StopRule::UntilTau if b == 1 => {
                    end = t;
                    break;
                }
                StopRule::UntilBlocks(target) if b <= target => {
                    end = t;
                    break;
                }
                _ => {}
            }
            let merge_rate = self.merge_rate(b);
            let mutation_rate = b as f64 * self.gamma;
            let total = merge_rate + mutation_rate;
            if total <= 0.0 {
                // only reachable with a single lineage and gamma = 0
                end = match self.stop {
                    StopRule::UntilTime(limit) => limit,
                    _ => t,
                };
                break;
            }
            count += 1;
            if count > EVENT_CAP {
                return Err(Error::NonTermination(EVENT_CAP));
            }
            let dt: f64 = rng.sample::<f64, _>(Exp1) / total;
            if let StopRule::UntilTime(limit) = self.stop {
                if t + dt > limit {
                    end = limit;
                    break;
                }
            }
            t += dt;
            let u: f64 = rng.random::<f64>() * total;
            if u < merge_rate {
                self.merge_step(&mut rng, t, &mut active, &mut next_id, &mut events)?;
                if active.len() == 1 {
                    after_tau = true;
                }
            } else {
                let target = active[rng.random_range(0..b)];
                events.push(Event::mutation(t, target, next_mutation));
                next_mutation += 1;
                if after_tau && self.stop == StopRule::UntilTauStar {
                    end = t;
                    break;
                }
            }
        }
        MarkedGenealogy::build(self.n, events, self.gamma, Some(seed), Some(self.stop), Some(end))
    }

    fn merge_rate(&self, b: usize) -> f64 {
        if b < 2 {
            return 0.0;
        }
        let pairs = (b * (b - 1) / 2) as f64;
        match &*self.engine {
            Engine::Pairwise => pairs,
            Engine::Lambda(rates) => rates.total(b),
            Engine::Xi {
                rate_cdf,
                kingman_mass,
                ..
            } => rate_cdf.last().copied().unwrap_or(0.0) + kingman_mass * pairs,
        }
    }

    fn merge_step(
        &self,
        rng: &mut ChaCha8Rng,
        t: f64,
        active: &mut Vec<LineageId>,
        next_id: &mut LineageId,
        events: &mut Vec<Event>,
    ) -> Result<()> {
        let b = active.len();
        match &*self.engine {
            Engine::Pairwise => {
                merge_random_subset(rng, t, 2, active, next_id, events);
            }
            Engine::Lambda(rates) => {
                let k = sample_merger_size(rng, rates, b)?;
                merge_random_subset(rng, t, k, active, next_id, events);
            }
            Engine::Xi {
                cumulative,
                rate_cdf,
                kingman_mass,
            } => {
                let atoms_rate = rate_cdf.last().copied().unwrap_or(0.0);
                let pairs = (b * (b - 1) / 2) as f64;
                let u: f64 = rng.random::<f64>() * (atoms_rate + kingman_mass * pairs);
                if u >= atoms_rate {
                    merge_random_subset(rng, t, 2, active, next_id, events);
                    return Ok(());
                }
                let j = rate_cdf.partition_point(|&c| c <= u).min(rate_cdf.len() - 1);
                paintbox_step(rng, t, &cumulative[j], active, next_id, events);
            }
        }
        Ok(())
    }
}

/// Draw the merger size `k` with probability `C(b,k) λ_{b,k} / λ_b`.
fn sample_merger_size(rng: &mut ChaCha8Rng, rates: &LambdaRates, b: usize) -> Result<usize> {
    let target = rng.random::<f64>() * rates.total(b);
    let mut acc = 0.0;
    for k in 2..=b {
        acc += rates.weighted(b, k)?;
        if acc > target {
            return Ok(k);
        }
    }
    // Rounding left the direct sum just below the tabulated total; redraw
    // against the direct sum, which is the exact normaliser.
    let target = rng.random::<f64>() * acc;
    let mut acc = 0.0;
    for k in 2..=b {
        acc += rates.weighted(b, k)?;
        if acc > target {
            return Ok(k);
        }
    }
    Ok(b)
}

/// Merge a uniformly chosen `k`-subset of `active` (partial Fisher–Yates
/// from the back of the list).
fn merge_random_subset(
    rng: &mut ChaCha8Rng,
    t: f64,
    k: usize,
    active: &mut Vec<LineageId>,
    next_id: &mut LineageId,
    events: &mut Vec<Event>,
) {
    let b = active.len();
    for i in 0..k {
        let j = rng.random_range(0..b - i);
        active.swap(j, b - 1 - i);
    }
    let participants = active.split_off(b - k);
    let id = *next_id;
    *next_id += 1;
    events.push(Event::merger(t, participants, id));
    active.push(id);
}

/// Colour every active lineage by `P_x` and collapse each colour class with
/// two or more members. Classes are emitted in colour order at the same `t`.
fn paintbox_step(
    rng: &mut ChaCha8Rng,
    t: f64,
    cumulative: &[f64],
    active: &mut Vec<LineageId>,
    next_id: &mut LineageId,
    events: &mut Vec<Event>,
) {
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); cumulative.len()];
    for pos in 0..active.len() {
        let u: f64 = rng.random();
        let colour = cumulative.partition_point(|&c| c <= u);
        if colour < cumulative.len() {
            classes[colour].push(pos);
        }
    }
    let mut removed = vec![false; active.len()];
    let mut born = Vec::new();
    for class in classes.into_iter().filter(|c| c.len() >= 2) {
        let participants: Vec<LineageId> = class.iter().map(|&p| active[p]).collect();
        class.iter().for_each(|&p| removed[p] = true);
        let id = *next_id;
        *next_id += 1;
        events.push(Event::merger(t, participants, id));
        born.push(id);
    }
    if born.is_empty() {
        return;
    }
    let mut pos = 0;
    active.retain(|_| {
        let keep = !removed[pos];
        pos += 1;
        keep
    });
    active.extend(born);
}

/// One-shot simulation.
pub fn simulate(
    m: &CoalescentMeasure,
    n: u32,
    gamma: f64,
    seed: u64,
    stop: StopRule,
) -> Result<MarkedGenealogy> {
    Simulator::new(m, n, gamma, stop)?.run(seed)
}
