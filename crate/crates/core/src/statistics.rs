//! Trajectories, family decompositions and frequency spectra derived from a
//! [`MarkedGenealogy`].

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::simulator::{EventKind, MarkedGenealogy};

/// Counts after one event (or at time 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub n: u32,
    pub n_open: u32,
    pub m: u32,
    pub m_open: u32,
    /// ∫₀ᵗ N(u) du
    pub length: f64,
}

impl TrajectoryPoint {
    pub fn n_closed(&self) -> u32 {
        self.n - self.n_open
    }

    pub fn m_closed(&self) -> u32 {
        self.m - self.m_open
    }
}

/// Right-continuous step functions N, N^o, M, M^o with one breakpoint per
/// event; tied events give several points at the same time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStats {
    points: Vec<TrajectoryPoint>,
    end: f64,
}

impl TrajectoryStats {
    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    /// State at `t`, after all events at `t`.
    pub fn at(&self, t: f64) -> TrajectoryPoint {
        let i = self.points.partition_point(|p| p.t <= t).max(1) - 1;
        self.extend(self.points[i], t)
    }

    /// Left limit at `t`.
    pub fn before(&self, t: f64) -> TrajectoryPoint {
        let i = self.points.partition_point(|p| p.t < t).max(1) - 1;
        self.extend(self.points[i], t)
    }

    fn extend(&self, p: TrajectoryPoint, t: f64) -> TrajectoryPoint {
        let t = t.max(p.t);
        TrajectoryPoint {
            t,
            length: p.length + p.n as f64 * (t - p.t),
            ..p
        }
    }

    /// L(t) = ∫₀ᵗ N(u) du.
    pub fn length(&self, t: f64) -> f64 {
        self.at(t).length
    }

    /// sup over u ≤ s of |1 − N^o(u)/N(u)|.
    pub fn open_deficit_sup(&self, s: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.t <= s)
            .map(|p| 1.0 - p.n_open as f64 / p.n as f64)
            .fold(0.0, f64::max)
    }
}

pub fn trajectories(g: &MarkedGenealogy) -> TrajectoryStats {
    let n = g.n();
    let mut cur = TrajectoryPoint {
        t: 0.0,
        n,
        n_open: n,
        m: 0,
        m_open: 0,
        length: 0.0,
    };
    let mut points = Vec::with_capacity(g.events().len() + 1);
    points.push(cur);
    let lineages = g.lineages();
    let mut mutations = g.mutations().iter();
    let mut born = n as usize;
    for ev in g.events() {
        cur.length += cur.n as f64 * (ev.t - cur.t);
        cur.t = ev.t;
        match &ev.kind {
            EventKind::Merger { participants, .. } => {
                // every participant died at this event, so its state just
                // before is its final state
                let open_before = participants
                    .iter()
                    .filter(|&&id| {
                        let rec = g.lineage(id).expect("validated");
                        rec.born_open
                            && rec.mutations.first().is_none_or(|&m| g.mutations()[m].t > ev.t)
                    })
                    .count() as u32;
                cur.n -= participants.len() as u32 - 1;
                cur.n_open -= open_before;
                if lineages[born].born_open {
                    cur.n_open += 1;
                }
                born += 1;
            }
            EventKind::Mutation { .. } => {
                let rec = mutations.next().expect("validated");
                cur.m += 1;
                if rec.open {
                    cur.m_open += 1;
                    cur.n_open -= 1;
                }
            }
        }
        points.push(cur);
    }
    TrajectoryStats {
        points,
        end: g.end(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SitesFamily {
    pub mutation_id: u32,
    pub leaves: Vec<u32>,
}

/// One family per mutation: the leaves below the marked lineage.
pub fn sites_families(g: &MarkedGenealogy) -> Vec<SitesFamily> {
    g.mutations()
        .iter()
        .map(|m| SitesFamily {
            mutation_id: m.id,
            leaves: g.leaves(m.lineage),
        })
        .collect()
}

/// Allelic type of every leaf (index `leaf - 1`): the id of the lowest
/// mutation on its path to the root, or 0 if there is none.
pub fn allelic_types(g: &MarkedGenealogy) -> Vec<u32> {
    let recs = g.lineages();
    let mut ty = vec![0u32; recs.len()];
    // parents are always created after their children
    for i in (0..recs.len()).rev() {
        ty[i] = match recs[i].mutations.first() {
            Some(&m) => g.mutations()[m].id,
            None => recs[i].parent.map_or(0, |p| ty[p]),
        };
    }
    ty.truncate(g.n() as usize);
    ty
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlleleBlock {
    /// Mutation id, or 0 for the ancestral type.
    pub allele: u32,
    pub leaves: Vec<u32>,
}

/// Blocks of leaves sharing an allelic type, ordered by smallest leaf.
pub fn alleles_partition(g: &MarkedGenealogy) -> Vec<AlleleBlock> {
    let mut blocks: Vec<AlleleBlock> = Vec::new();
    let mut slot: HashMap<u32, usize> = HashMap::new();
    for (leaf, &a) in allelic_types(g).iter().enumerate() {
        let i = *slot.entry(a).or_insert_with(|| {
            blocks.push(AlleleBlock {
                allele: a,
                leaves: Vec::new(),
            });
            blocks.len() - 1
        });
        blocks[i].leaves.push(leaf as u32 + 1);
    }
    blocks
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Spectrum {
    /// r ↦ M_r, number of sites families of size r.
    pub sites: BTreeMap<u32, u32>,
    /// r ↦ M_r^o, number of mutant allele blocks of size r.
    pub alleles: BTreeMap<u32, u32>,
}

impl Spectrum {
    pub fn sites_at(&self, r: u32) -> u32 {
        self.sites.get(&r).copied().unwrap_or(0)
    }

    pub fn alleles_at(&self, r: u32) -> u32 {
        self.alleles.get(&r).copied().unwrap_or(0)
    }
}

/// Sites and alleles spectra. The ancestral block (type 0) is not counted.
pub fn spectrum_counts(g: &MarkedGenealogy) -> Spectrum {
    let mut out = Spectrum::default();
    for m in g.mutations() {
        *out.sites.entry(g.lineages()[m.lineage].size).or_default() += 1;
    }
    let mut sizes: HashMap<u32, u32> = HashMap::new();
    for a in allelic_types(g) {
        if a != 0 {
            *sizes.entry(a).or_default() += 1;
        }
    }
    for size in sizes.into_values() {
        *out.alleles.entry(size).or_default() += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyDecomposition {
    pub sites_families: Vec<SitesFamily>,
    pub alleles_partition: Vec<AlleleBlock>,
    pub spectrum: Spectrum,
}

pub fn family_decomposition(g: &MarkedGenealogy) -> FamilyDecomposition {
    FamilyDecomposition {
        sites_families: sites_families(g),
        alleles_partition: alleles_partition(g),
        spectrum: spectrum_counts(g),
    }
}

/// β Γ(r−β) ℓ / r!
pub fn predicted_spectrum(beta: f64, r: u32, ell: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::BadBeta(beta));
    }
    if r == 0 {
        return Err(Error::BadParameter("spectrum index r must be >= 1".into()));
    }
    let r = r as f64;
    Ok(beta * ell * (ln_gamma(r - beta) - ln_gamma(r + 1.0)).exp())
}

/// CSV rows `r,sites_count,alleles_count` for every r with a nonzero count.
pub fn spectrum_csv(s: &Spectrum) -> String {
    let mut out = String::from("r,sites_count,alleles_count\n");
    let mut rs: Vec<u32> = s.sites.keys().chain(s.alleles.keys()).copied().collect();
    rs.sort_unstable();
    rs.dedup();
    for r in rs {
        let _ = writeln!(out, "{r},{},{}", s.sites_at(r), s.alleles_at(r));
    }
    out
}

/// CSV rows `leaf,block_id` with block ids numbered from 1 in block order.
pub fn partition_csv(blocks: &[AlleleBlock]) -> String {
    let mut rows: Vec<(u32, usize)> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, blk)| blk.leaves.iter().map(move |&l| (l, b + 1)))
        .collect();
    rows.sort_unstable();
    let mut out = String::from("leaf,block_id\n");
    for (leaf, b) in rows {
        let _ = writeln!(out, "{leaf},{b}");
    }
    out
}

/// CSV rows `mutation_id,size,leaves` with leaves separated by spaces.
pub fn sites_csv(families: &[SitesFamily]) -> String {
    let mut out = String::from("mutation_id,size,leaves\n");
    for f in families {
        let leaves: Vec<String> = f.leaves.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{},{},{}", f.mutation_id, f.leaves.len(), leaves.join(" "));
    }
    out
}

/// CSV of the trajectory breakpoints.
pub fn trajectories_csv(tr: &TrajectoryStats) -> String {
    let mut out = String::from("t,N,N_open,N_closed,M,M_open,M_closed,L\n");
    for p in tr.points() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.t,
            p.n,
            p.n_open,
            p.n_closed(),
            p.m,
            p.m_open,
            p.m_closed(),
            p.length
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::CoalescentMeasure;
    use crate::simulator::{replay, simulate, Event, StopRule};

    fn worked_example() -> MarkedGenealogy {
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
        replay(script, 9).unwrap()
    }

    #[test]
    fn worked_example_counts() {
        let tr = trajectories(&worked_example());
        let p = tr.at(1.5);
        assert_eq!((p.n, p.n_open, p.m, p.m_open), (4, 4, 5, 4));
        assert_eq!(tr.before(1.5).n_closed(), 4);
        assert_eq!(p.n_closed(), 0);
        assert_eq!(tr.before(2.5).n_closed(), 2);
    }

    #[test]
    fn worked_example_families() {
        let g = worked_example();
        let fams = sites_families(&g);
        assert_eq!(fams.len(), 10);
        let alleles: Vec<Vec<u32>> = alleles_partition(&g).into_iter().map(|b| b.leaves).collect();
        assert_eq!(
            alleles,
            vec![vec![1], vec![2, 5], vec![3], vec![4], vec![6, 9], vec![7], vec![8]]
        );
        let s = spectrum_counts(&g);
        assert_eq!(s.sites, BTreeMap::from([(1, 6), (4, 3), (9, 1)]));
        assert_eq!(s.alleles, BTreeMap::from([(1, 5), (2, 2)]));
    }

    #[test]
    fn length_examples() {
        let g = replay(vec![Event::merger(1.0, vec![1, 2], 3)], 2).unwrap();
        assert_eq!(trajectories(&g).length(2.0), 3.0);
        let g = replay(Vec::new(), 3).unwrap();
        let tr = trajectories(&g);
        assert_eq!(tr.length(2.0), 6.0);
        assert_eq!(tr.at(2.0).n, 3);
    }

    #[test]
    fn small_cases() {
        let g = replay(vec![Event::mutation(0.5, 1, 1)], 1).unwrap();
        assert_eq!(
            sites_families(&g),
            vec![SitesFamily {
                mutation_id: 1,
                leaves: vec![1]
            }]
        );
        let g = replay(Vec::new(), 4).unwrap();
        assert!(sites_families(&g).is_empty());
        assert_eq!(spectrum_counts(&g), Spectrum::default());
        assert_eq!(alleles_partition(&g).len(), 1);
        assert_eq!(alleles_partition(&g)[0].allele, 0);
    }

    #[test]
    fn simulated_identities() {
        let m = CoalescentMeasure::beta(1.5).unwrap();
        for seed in 0..20 {
            let g = simulate(&m, 60, 1.5, seed, StopRule::UntilTauStar).unwrap();
            let tr = trajectories(&g);
            let last = tr.at(g.end());
            let blocks = alleles_partition(&g);
            assert_eq!(blocks.len() as u32, last.m_open);
            assert!(blocks.iter().all(|b| b.allele != 0));
            let s = spectrum_counts(&g);
            assert_eq!(s.alleles.iter().map(|(r, c)| r * c).sum::<u32>(), 60);
            assert_eq!(s.sites.values().sum::<u32>(), last.m);
            let at_tau = tr.at(g.tau().unwrap());
            assert_eq!(last.m, at_tau.m + 1);
            for w in tr.points().windows(2) {
                assert!(w[1].n <= w[0].n && w[1].n_open <= w[0].n_open);
                assert!(w[1].m >= w[0].m && w[1].m_open >= w[0].m_open);
                assert!(w[1].length >= w[0].length);
            }
        }
    }

    #[test]
    fn predicted_values() {
        assert!((predicted_spectrum(0.5, 1, 100.0).unwrap() - 88.622_692_545_275_8).abs() < 1e-9);
        assert!((predicted_spectrum(0.5, 2, 100.0).unwrap() - 22.155_673_136_318_95).abs() < 1e-9);
        assert_eq!(predicted_spectrum(1.0, 1, 1.0).unwrap_err(), Error::BadBeta(1.0));
    }

    #[test]
    fn csv_shapes() {
        let g = worked_example();
        let s = spectrum_csv(&spectrum_counts(&g));
        assert_eq!(s, "r,sites_count,alleles_count\n1,6,5\n2,0,2\n4,3,0\n9,1,0\n");
        let p = partition_csv(&alleles_partition(&g));
        assert!(p.starts_with("leaf,block_id\n1,1\n2,2\n3,3\n"));
    }
}
