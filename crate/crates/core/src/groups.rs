//! Group detection from pedestrian trajectories.
//!
//! Each pedestrian gets a distribution over all others from the closeness of
//! their sources and sinks. A pedestrian's most likely partner forms a couple
//! only if the two distributions agree under KL divergence, and groups are
//! the connected components of the accepted couples.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{draw_polyline, Raster, Rgb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub x: f64,
    pub y: f64,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedestrianTrajectory {
    pub id: u64,
    /// Strictly increasing in `t`, at least two points.
    pub points: Vec<TrajPoint>,
}

impl PedestrianTrajectory {
    pub fn new(id: u64, mut points: Vec<TrajPoint>) -> Result<Self> {
        points.sort_by_key(|p| p.t);
        if points.len() < 2 {
            return Err(Error::param(format!("pedestrian {id} has fewer than 2 points")));
        }
        if let Some(w) = points.windows(2).find(|w| w[0].t == w[1].t) {
            return Err(Error::param(format!("pedestrian {id} has two rows at t = {}", w[0].t)));
        }
        Ok(Self { id, points })
    }

    pub fn source(&self) -> (f64, f64) {
        let p = &self.points[0];
        (p.x, p.y)
    }

    pub fn sink(&self) -> (f64, f64) {
        let p = self.points.last().expect("at least two points");
        (p.x, p.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub trajectories: Vec<PedestrianTrajectory>,
    /// Pedestrians dropped for having a single point.
    pub dropped: usize,
}

#[derive(Debug, Deserialize)]
struct Row {
    ped_id: u64,
    x: f64,
    y: f64,
    t: u64,
}

/// Parse `ped_id,x,y,t` rows; output is sorted by id, points by time.
pub fn ingest_trajectories(reader: impl Read) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["ped_id", "x", "y", "t"] {
        return Err(Error::Csv {
            line: 1,
            msg: format!("expected header ped_id,x,y,t, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut by_id: BTreeMap<u64, BTreeMap<u64, TrajPoint>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::Csv { line, msg: e.to_string() })?;
        if !row.x.is_finite() || !row.y.is_finite() {
            return Err(Error::Csv {
                line,
                msg: format!("non-finite position for pedestrian {}", row.ped_id),
            });
        }
        let points = by_id.entry(row.ped_id).or_default();
        if points.insert(row.t, TrajPoint { x: row.x, y: row.y, t: row.t }).is_some() {
            return Err(Error::Csv {
                line,
                msg: format!("duplicate row for pedestrian {} at t = {}", row.ped_id, row.t),
            });
        }
    }
    let mut dropped = 0;
    let mut trajectories = Vec::new();
    for (id, points) in by_id {
        if points.len() < 2 {
            dropped += 1;
            continue;
        }
        trajectories.push(PedestrianTrajectory {
            id,
            points: points.into_values().collect(),
        });
    }
    Ok(Ingested { trajectories, dropped })
}

/// Row-stochastic pedestrian affinity matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    pub ids: Vec<u64>,
    pub p: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl AssociationMatrix {
    pub fn n(&self) -> usize {
        self.ids.len()
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn association_matrix(trajs: &[PedestrianTrajectory], sigma: f64) -> Result<AssociationMatrix> {
    if trajs.len() < 2 {
        return Err(Error::TooFewPedestrians);
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be > 0, got {sigma}")));
    }
    let n = trajs.len();
    let mut p = Vec::with_capacity(n);
    for (k, a) in trajs.iter().enumerate() {
        // Subtracting the row minimum keeps far-apart scenes from
        // underflowing to an all-zero row.
        let d: Vec<f64> = trajs
            .iter()
            .map(|b| dist(a.source(), b.source()) + dist(a.sink(), b.sink()))
            .collect();
        let d_min = d
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        let mut row: Vec<f64> = d
            .iter()
            .enumerate()
            .map(|(j, &v)| if j == k { 0.0 } else { (-(v - d_min) / sigma).exp() })
            .collect();
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
        p.push(row);
    }
    Ok(AssociationMatrix {
        ids: trajs.iter().map(|t| t.id).collect(),
        p,
        sigma,
    })
}

/// `D(p_r || p_k)` in nats after mixing both rows with the uniform
/// distribution by `smoothing`.
pub fn kl_divergence(p_r: &[f64], p_k: &[f64], smoothing: f64) -> Result<f64> {
    if p_r.len() != p_k.len() || p_r.is_empty() {
        return Err(Error::param(format!(
            "rows differ in length ({} vs {})",
            p_r.len(),
            p_k.len()
        )));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::param(format!("smoothing must be in [0, 1], got {smoothing}")));
    }
    let u = smoothing / p_r.len() as f64;
    let mut d = 0.0;
    for (&a, &b) in p_r.iter().zip(p_k) {
        let (qa, qb) = ((1.0 - smoothing) * a + u, (1.0 - smoothing) * b + u);
        if qa > 0.0 {
            d += qa * (qa / qb).ln();
        }
    }
    Ok(d.max(0.0))
}

/// Rows `k` and `j` with their mutual columns merged into one, so a pair
/// that points at each other compares as equal.
pub fn collapsed_rows(assoc: &AssociationMatrix, k: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
    let collapse = |row: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(row.len() - 1);
        out.push(row[k] + row[j]);
        out.extend(row.iter().enumerate().filter(|&(i, _)| i != k && i != j).map(|(_, &v)| v));
        out
    };
    (collapse(&assoc.p[k]), collapse(&assoc.p[j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub ids: Vec<u64>,
    /// Symmetric, zero diagonal.
    pub bits: Vec<Vec<bool>>,
}

impl AdjacencyMatrix {
    pub fn empty(ids: Vec<u64>) -> Self {
        let n = ids.len();
        Self { ids, bits: vec![vec![false; n]; n] }
    }

    pub fn link(&mut self, a: usize, b: usize) {
        if a != b {
            self.bits[a][b] = true;
            self.bits[b][a] = true;
        }
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.ids.len();
        (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| self.bits[a][b])
            .collect()
    }
}

/// Does the candidate couple `(k, j)` pass KL in both directions?
pub fn couple_accepted(assoc: &AssociationMatrix, k: usize, j: usize, kl_threshold: f64, smoothing: f64) -> Result<bool> {
    let (rk, rj) = collapsed_rows(assoc, k, j);
    Ok(kl_divergence(&rk, &rj, smoothing)? <= kl_threshold && kl_divergence(&rj, &rk, smoothing)? <= kl_threshold)
}

/// Greedy couples: each pedestrian proposes its highest-affinity partner
/// (lowest index on ties) and bad couples are pruned by KL.
pub fn detect_couples(assoc: &AssociationMatrix, kl_threshold: f64, smoothing: f64) -> Result<AdjacencyMatrix> {
    let mut adj = AdjacencyMatrix::empty(assoc.ids.clone());
    for k in 0..assoc.n() {
        let mut j = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, &v) in assoc.p[k].iter().enumerate() {
            if i != k && v > best {
                best = v;
                j = i;
            }
        }
        if couple_accepted(assoc, k, j, kl_threshold, smoothing)? {
            adj.link(k, j);
        }
    }
    Ok(adj)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSet {
    /// Each group sorted; groups ordered by their smallest id.
    pub groups: Vec<Vec<u64>>,
    pub singletons: Vec<u64>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn extract_groups(adj: &AdjacencyMatrix) -> GroupSet {
    let n = adj.ids.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for (a, b) in adj.edges() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    let mut comps: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        comps.entry(r).or_default().push(adj.ids[i]);
    }
    let mut groups = Vec::new();
    let mut singletons = Vec::new();
    for (_, mut members) in comps {
        members.sort_unstable();
        if members.len() >= 2 {
            groups.push(members);
        } else {
            singletons.push(members[0]);
        }
    }
    groups.sort();
    singletons.sort_unstable();
    GroupSet { groups, singletons }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupParams {
    pub sigma: f64,
    pub kl_threshold: f64,
    pub smoothing: f64,
}

impl Default for GroupParams {
    fn default() -> Self {
        Self {
            sigma: 20.0,
            kl_threshold: 0.5,
            smoothing: 1e-6,
        }
    }
}

/// Association, couples and groups in one go.
pub fn detect_groups(trajs: &[PedestrianTrajectory], params: &GroupParams) -> Result<GroupSet> {
    let assoc = association_matrix(trajs, params.sigma)?;
    let adj = detect_couples(&assoc, params.kl_threshold, params.smoothing)?;
    Ok(extract_groups(&adj))
}

/// One line per group with its sorted member ids.
pub fn format_groups(groups: &GroupSet) -> String {
    let mut out = String::new();
    for g in &groups.groups {
        let ids: Vec<String> = g.iter().map(u64::to_string).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
    }
    out
}

/// Trajectories drawn on a dark canvas, one color per group and grey for
/// singletons.
pub fn overlay(width: usize, height: usize, trajs: &[PedestrianTrajectory], groups: &GroupSet) -> Vec<Rgb> {
    let mut canvas = Raster::filled(width, height, [20u8, 20, 20]);
    for t in trajs {
        let color = groups
            .groups
            .iter()
            .position(|g| g.contains(&t.id))
            .map_or([128, 128, 128], |i| crate::flowseg::PALETTE[i % crate::flowseg::PALETTE.len()]);
        let pts: Vec<(f64, f64)> = t.points.iter().map(|p| (p.x, p.y)).collect();
        draw_polyline(&mut canvas, &pts, color);
    }
    canvas.into_data()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn straight(id: u64, src: (f64, f64), snk: (f64, f64)) -> PedestrianTrajectory {
        PedestrianTrajectory::new(
            id,
            vec![
                TrajPoint { x: src.0, y: src.1, t: 0 },
                TrajPoint { x: snk.0, y: snk.1, t: 10 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn ingest_basic() {
        let got = ingest_trajectories("ped_id,x,y,t\n1,0,0,0\n1,1,1,1\n".as_bytes()).unwrap();
        assert_eq!(got.trajectories.len(), 1);
        assert_eq!(got.trajectories[0].points.len(), 2);
        let empty = ingest_trajectories("ped_id,x,y,t\n".as_bytes()).unwrap();
        assert!(empty.trajectories.is_empty());
        let dropped = ingest_trajectories("ped_id,x,y,t\n4,0,0,0\n".as_bytes()).unwrap();
        assert_eq!(dropped.dropped, 1);
    }

    #[test]
    fn ingest_errors() {
        match ingest_trajectories("ped_id,x,y,t\n1,0,0,0\n1,zz,1,1\n".as_bytes()) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ingest_trajectories("ped_id,x,y,t\n1,0,0,0\n1,2,2,0\n".as_bytes()),
            Err(Error::Csv { line: 3, .. })
        ));
        assert!(ingest_trajectories("id,x,y,t\n".as_bytes()).is_err());
    }

    #[test]
    fn shuffled_equals_sorted() {
        let rows = ["2,5,5,3", "1,0,0,0", "2,4,4,1", "1,2,0,2", "1,1,0,1", "2,6,6,7"];
        let mut sorted: Vec<(u64, u64, &str)> = rows
            .iter()
            .map(|r| {
                let f: Vec<&str> = r.split(',').collect();
                (f[0].parse().unwrap(), f[3].parse().unwrap(), *r)
            })
            .collect();
        sorted.sort();
        let body = |rs: Vec<&str>| format!("ped_id,x,y,t\n{}\n", rs.join("\n"));
        let a = ingest_trajectories(body(rows.to_vec()).as_bytes()).unwrap();
        let b = ingest_trajectories(body(sorted.iter().map(|s| s.2).collect()).as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn association_examples() {
        let two = [straight(1, (0.0, 0.0), (9.0, 9.0)), straight(2, (50.0, 0.0), (3.0, 3.0))];
        let a = association_matrix(&two, 20.0).unwrap();
        assert_eq!(a.p, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(matches!(association_matrix(&two[..1], 20.0), Err(Error::TooFewPedestrians)));

        let three = [
            straight(1, (0.0, 0.0), (100.0, 0.0)),
            straight(2, (0.0, 0.0), (100.0, 0.0)),
            straight(3, (500.0, 500.0), (600.0, 600.0)),
        ];
        let a = association_matrix(&three, 20.0).unwrap();
        // Hand evaluation: p_12 = 1 / (1 + exp(-d_13 / sigma)).
        let d13 = dist((0.0, 0.0), (500.0, 500.0)) + dist((100.0, 0.0), (600.0, 600.0));
        let expected = 1.0 / (1.0 + (-d13 / 20.0).exp());
        assert!((a.p[0][1] - expected).abs() < 1e-12);
        assert!((a.p[0][1] - 1.0).abs() < 1e-6 && (a.p[1][0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let d = kl_divergence(&[0.5, 0.5], &[0.25, 0.75], 0.0).unwrap();
        let direct = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((d - direct).abs() < 1e-12);
        assert!((d - 0.1438).abs() < 5e-5);
        let r = kl_divergence(&[0.25, 0.75], &[0.5, 0.5], 0.0).unwrap();
        let direct_rev = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((r - direct_rev).abs() < 1e-12);
        assert!((r - d).abs() > 1e-3);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7], 1e-6).unwrap(), 0.0);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5], 0.0).is_err());
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0], 1e-6).unwrap().is_finite());
    }

    #[test]
    fn couples_examples() {
        let two = [straight(1, (0.0, 0.0), (9.0, 9.0)), straight(2, (0.0, 0.0), (9.0, 9.0))];
        let a = association_matrix(&two, 20.0).unwrap();
        let adj = detect_couples(&a, 0.5, 1e-6).unwrap();
        assert_eq!(adj.edges(), vec![(0, 1)]);

        let three = [
            straight(1, (0.0, 0.0), (10.0, 0.0)),
            straight(2, (30.0, 0.0), (40.0, 0.0)),
            straight(3, (0.0, 50.0), (20.0, 70.0)),
        ];
        let a = association_matrix(&three, 20.0).unwrap();
        assert!(detect_couples(&a, 0.0, 1e-6).unwrap().edges().is_empty());
    }

    fn pair_scene() -> Vec<PedestrianTrajectory> {
        let mut v = vec![];
        for (g, (ox, oy)) in [(0.0, 0.0), (200.0, 40.0), (60.0, 220.0)].iter().enumerate() {
            v.push(straight(2 * g as u64, (*ox, *oy), (ox + 100.0, oy + 30.0)));
            v.push(straight(2 * g as u64 + 1, (ox + 3.0, oy + 2.0), (ox + 102.0, oy + 33.0)));
        }
        v
    }

    #[test]
    fn three_pairs_match_all_pairs_oracle() {
        let a = association_matrix(&pair_scene(), 20.0).unwrap();
        let adj = detect_couples(&a, 0.5, 1e-6).unwrap();
        assert_eq!(adj.edges(), vec![(0, 1), (2, 3), (4, 5)]);
        // All-pairs: an edge exists iff one endpoint proposes the other and
        // the pair passes both KL tests.
        let n = a.n();
        for x in 0..n {
            for y in x + 1..n {
                let argmax = |k: usize| {
                    (0..n).filter(|&j| j != k).fold(usize::MAX, |b, j| {
                        if b == usize::MAX || a.p[k][j] > a.p[k][b] { j } else { b }
                    })
                };
                let proposed = argmax(x) == y || argmax(y) == x;
                let ok = couple_accepted(&a, x, y, 0.5, 1e-6).unwrap();
                assert_eq!(adj.bits[x][y], proposed && ok);
            }
        }
    }

    #[test]
    fn extract_examples() {
        let mut adj = AdjacencyMatrix::empty(vec![1, 2, 3, 4]);
        adj.link(0, 1);
        adj.link(1, 2);
        let g = extract_groups(&adj);
        assert_eq!(g.groups, vec![vec![1, 2, 3]]);
        assert_eq!(g.singletons, vec![4]);
        let none = extract_groups(&AdjacencyMatrix::empty(vec![5, 6]));
        assert!(none.groups.is_empty());
        assert_eq!(none.singletons, vec![5, 6]);
        assert_eq!(format_groups(&g), "1 2 3\n");
    }

    fn flood_partition(adj: &AdjacencyMatrix) -> Vec<Vec<u64>> {
        let n = adj.ids.len();
        let mut seen = vec![false; n];
        let mut out = vec![];
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut stack = vec![s];
            seen[s] = true;
            let mut comp = vec![];
            while let Some(i) = stack.pop() {
                comp.push(adj.ids[i]);
                for j in 0..n {
                    if adj.bits[i][j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out.sort();
        out
    }

    fn arb_traj_set() -> impl Strategy<Value = Vec<PedestrianTrajectory>> {
        prop::collection::vec(((0.0f64..300.0, 0.0f64..300.0), (0.0f64..300.0, 0.0f64..300.0)), 2..9)
            .prop_map(|v| v.into_iter().enumerate().map(|(i, (s, k))| straight(i as u64, s, k)).collect())
    }

    proptest! {
        #[test]
        fn extract_matches_flood_fill(edges in prop::collection::vec((0usize..10, 0usize..10), 0..15)) {
            let mut adj = AdjacencyMatrix::empty((0..10).collect());
            for (a, b) in edges {
                adj.link(a, b);
            }
            let g = extract_groups(&adj);
            let mut got: Vec<Vec<u64>> = g.groups.clone();
            got.extend(g.singletons.iter().map(|&s| vec![s]));
            got.sort();
            prop_assert_eq!(got, flood_partition(&adj));
        }

        #[test]
        fn kl_nonnegative_and_finite(
            a in prop::collection::vec(0.0f64..1.0, 5),
            b in prop::collection::vec(0.0f64..1.0, 5),
        ) {
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum::<f64>() + 1e-9;
                v.into_iter().map(|x| (x + 1e-9 / 5.0) / s).collect::<Vec<_>>()
            };
            let (a, b) = (norm(a), norm(b));
            let d = kl_divergence(&a, &b, 1e-6).unwrap();
            prop_assert!(d >= 0.0 && d.is_finite());
            prop_assert_eq!(kl_divergence(&a, &a, 1e-6).unwrap(), 0.0);
        }

        #[test]
        fn association_invariants(trajs in arb_traj_set(), scale in 0.1f64..10.0, rot in 0usize..8) {
            let a = association_matrix(&trajs, 20.0).unwrap();
            for (k, row) in a.p.iter().enumerate() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert_eq!(row[k], 0.0);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            let scaled: Vec<_> = trajs
                .iter()
                .map(|t| straight(t.id, (t.source().0 * scale, t.source().1 * scale), (t.sink().0 * scale, t.sink().1 * scale)))
                .collect();
            let b = association_matrix(&scaled, 20.0 * scale).unwrap();
            for (r, s) in a.p.iter().zip(&b.p) {
                for (x, y) in r.iter().zip(s) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
            let n = trajs.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let permuted: Vec<_> = perm.iter().map(|&i| trajs[i].clone()).collect();
            let c = association_matrix(&permuted, 20.0).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((c.p[i][j] - a.p[perm[i]][perm[j]]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn couples_symmetric_and_groups_partition(trajs in arb_traj_set(), thr in 0.0f64..2.0) {
            let a = association_matrix(&trajs, 20.0).unwrap();
            let adj = detect_couples(&a, thr, 1e-6).unwrap();
            for i in 0..a.n() {
                prop_assert!(!adj.bits[i][i]);
                for j in 0..a.n() {
                    prop_assert_eq!(adj.bits[i][j], adj.bits[j][i]);
                }
            }
            let g = extract_groups(&adj);
            let mut all: Vec<u64> = g.groups.iter().flatten().copied().chain(g.singletons.iter().copied()).collect();
            all.sort();
            prop_assert_eq!(all, a.ids.clone());
            prop_assert!(g.groups.iter().all(|m| m.len() >= 2));
        }
    }
}
