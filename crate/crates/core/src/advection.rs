//! Sources and sinks of dominant flows from particle advection.
//!
//! The video is cut into segments of `k` frames. A particle grid seeded on
//! the first frame of each segment is advected through the segment's flow
//! fields, giving tracklets. Tracklets whose ends meet are chained into
//! tracks, tracks are clustered with LCSS against running cluster centers,
//! and each large cluster reports where its members enter and leave.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::motion::FlowField;
use crate::raster::{draw_polyline, Raster, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub t: u64,
}

impl TrackPoint {
    fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// A particle path within one segment: one point per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub points: Vec<TrackPoint>,
}

impl Tracklet {
    pub fn source(&self) -> TrackPoint {
        self.points[0]
    }

    pub fn sink(&self) -> TrackPoint {
        *self.points.last().expect("tracklets are never empty")
    }

    pub fn displacement(&self) -> f64 {
        dist(self.source().xy(), self.sink().xy())
    }

    /// Direction of the net displacement.
    pub fn orientation(&self) -> f64 {
        let (s, e) = (self.source(), self.sink());
        (e.y - s.y).atan2(e.x - s.x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub points: Vec<TrackPoint>,
}

impl Track {
    pub fn new(points: Vec<TrackPoint>) -> Self {
        Self { points }
    }

    pub fn start(&self) -> TrackPoint {
        self.points[0]
    }

    pub fn end(&self) -> TrackPoint {
        *self.points.last().expect("tracks are never empty")
    }

    /// Euclidean distance between the first and last point.
    pub fn length(&self) -> f64 {
        dist(self.start().xy(), self.end().xy())
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0].xy(), w[1].xy())).sum()
    }

    /// `n` points evenly spaced by arc length.
    pub fn resample(&self, n: usize) -> Vec<(f64, f64)> {
        let pts: Vec<(f64, f64)> = self.points.iter().map(TrackPoint::xy).collect();
        if pts.len() == 1 || n == 1 {
            return vec![pts[0]; n];
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        let total = *cum.last().unwrap();
        if total == 0.0 {
            return vec![pts[0]; n];
        }
        let mut seg = 0;
        (0..n)
            .map(|i| {
                let s = total * i as f64 / (n - 1) as f64;
                while seg + 2 < cum.len() && cum[seg + 1] < s {
                    seg += 1;
                }
                let span = cum[seg + 1] - cum[seg];
                let f = if span > 0.0 { ((s - cum[seg]) / span).clamp(0.0, 1.0) } else { 0.0 };
                let (a, b) = (pts[seg], pts[seg + 1]);
                (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
            })
            .collect()
    }
}

impl From<Tracklet> for Track {
    fn from(t: Tracklet) -> Self {
        Track { points: t.points }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvectionParams {
    /// Frames per video segment.
    pub k: usize,
    pub grid_spacing: usize,
    pub lcss_eps: f64,
    pub lcss_delta: usize,
    pub sim_threshold: f64,
    /// Cluster size above which the center is refit.
    pub s: usize,
    pub poly_order: usize,
    pub resample_points: usize,
    pub min_displacement: f64,
    pub min_members: usize,
    pub gap_radius: f64,
    pub angle_tol: f64,
    /// Euler steps per frame; 1 is plain per-frame Euler.
    pub substeps: usize,
}

impl Default for AdvectionParams {
    fn default() -> Self {
        Self {
            k: 30,
            grid_spacing: 4,
            lcss_eps: 6.0,
            lcss_delta: 8,
            sim_threshold: 0.6,
            s: 30,
            poly_order: 3,
            resample_points: 32,
            min_displacement: 2.0,
            min_members: 5,
            gap_radius: 4.0,
            angle_tol: PI / 4.0,
            substeps: 1,
        }
    }
}

impl AdvectionParams {
    /// Checks every field; errors name the offending one.
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, why: &str| Err(Error::param(format!("{name} {why}")));
        if self.k < 2 {
            return bad("k", "must be >= 2");
        }
        if self.grid_spacing < 1 {
            return bad("grid_spacing", "must be >= 1");
        }
        if !(self.lcss_eps >= 0.0) {
            return bad("lcss_eps", "must be >= 0");
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return bad("sim_threshold", "must be in (0, 1]");
        }
        if self.s < 1 {
            return bad("s", "must be >= 1");
        }
        if self.poly_order < 1 {
            return bad("poly_order", "must be >= 1");
        }
        if self.resample_points < 2 {
            return bad("resample_points", "must be >= 2");
        }
        if !(self.min_displacement >= 0.0) {
            return bad("min_displacement", "must be >= 0");
        }
        if !(self.gap_radius > 0.0) {
            return bad("gap_radius", "must be > 0");
        }
        if !(self.angle_tol >= 0.0) {
            return bad("angle_tol", "must be >= 0");
        }
        if self.substeps < 1 {
            return bad("substeps", "must be >= 1");
        }
        Ok(())
    }
}

/// Advect a particle grid through one segment. `flows[i]` carries frame
/// `t0 + i` to `t0 + i + 1`.
pub fn advect(flows: &[FlowField], t0: u64, params: &AdvectionParams) -> Result<Vec<Tracklet>> {
    params.validate()?;
    let Some(first) = flows.first() else {
        return Err(Error::param("empty flow sequence"));
    };
    let (w, h) = first.dims();
    for f in flows {
        check_dims((w, h), f.dims())?;
    }
    let gs = params.grid_spacing;
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let mut out = Vec::new();
    for sy in (gs / 2..h).step_by(gs) {
        for sx in (gs / 2..w).step_by(gs) {
            let (mut x, mut y) = (sx as f64, sy as f64);
            let mut points = Vec::with_capacity(flows.len() + 1);
            points.push(TrackPoint { x, y, t: t0 });
            let dt = 1.0 / params.substeps as f64;
            for (i, f) in flows.iter().enumerate() {
                for _ in 0..params.substeps {
                    let (u, v) = f.sample(x, y);
                    x = (x + dt * u).clamp(0.0, xmax);
                    y = (y + dt * v).clamp(0.0, ymax);
                }
                points.push(TrackPoint { x, y, t: t0 + i as u64 + 1 });
            }
            let t = Tracklet { points };
            if t.displacement() >= params.min_displacement {
                out.push(t);
            }
        }
    }
    Ok(out)
}

/// Split a whole video's flows (`flows[i]` from frame `i` to `i + 1`) into
/// non-overlapping segments of `k` frames and advect each one. A trailing
/// partial segment is kept if it spans at least two frames.
pub fn advect_video(flows: &[FlowField], params: &AdvectionParams) -> Result<Vec<Tracklet>> {
    params.validate()?;
    let frames = flows.len() + 1;
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < frames {
        let end = (start + params.k).min(frames);
        out.extend(advect(&flows[start..end - 1], start as u64, params)?);
        start += params.k;
    }
    Ok(out)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// May `next` continue a track that currently ends with `prev`? Its source
/// must be one frame after `prev`'s sink, within `gap_radius`, and heading
/// within `angle_tol`.
pub fn can_link(prev: &Tracklet, next: &Tracklet, gap_radius: f64, angle_tol: f64) -> bool {
    next.source().t == prev.sink().t + 1
        && dist(prev.sink().xy(), next.source().xy()) <= gap_radius
        && angle_diff(prev.orientation(), next.orientation()) <= angle_tol
}

fn nearest_link(
    tracklets: &[Tracklet],
    used: &[bool],
    ok: impl Fn(&Tracklet) -> Option<f64>,
) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, t) in tracklets.iter().enumerate() {
        if used[i] {
            continue;
        }
        if let Some(d) = ok(t) {
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    best.map(|(_, i)| i)
}

/// Greedy chaining. Tracklets are taken as track seeds in descending
/// displacement; each seed grows forward and then backward by repeatedly
/// attaching the nearest compatible unused tracklet.
pub fn link_tracklets(tracklets: &[Tracklet], gap_radius: f64, angle_tol: f64) -> Result<Vec<Track>> {
    Ok(link_chains(tracklets, gap_radius, angle_tol)?
        .into_iter()
        .map(|chain| Track::new(chain.iter().flat_map(|&i| tracklets[i].points.iter().copied()).collect()))
        .collect())
}

/// Chains as tracklet indices, in time order.
pub fn link_chains(tracklets: &[Tracklet], gap_radius: f64, angle_tol: f64) -> Result<Vec<Vec<usize>>> {
    if !(gap_radius > 0.0) {
        return Err(Error::param("gap_radius must be > 0"));
    }
    let mut order: Vec<usize> = (0..tracklets.len()).collect();
    order.sort_by(|&a, &b| tracklets[b].displacement().total_cmp(&tracklets[a].displacement()).then(a.cmp(&b)));
    let mut used = vec![false; tracklets.len()];
    let mut chains = Vec::new();
    for seed in order {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        let mut chain = std::collections::VecDeque::from([seed]);
        while let Some(next) = nearest_link(tracklets, &used, |t| {
            let tail = &tracklets[*chain.back().unwrap()];
            can_link(tail, t, gap_radius, angle_tol).then(|| dist(tail.sink().xy(), t.source().xy()))
        }) {
            used[next] = true;
            chain.push_back(next);
        }
        while let Some(prev) = nearest_link(tracklets, &used, |t| {
            let head = &tracklets[*chain.front().unwrap()];
            can_link(t, head, gap_radius, angle_tol).then(|| dist(t.sink().xy(), head.source().xy()))
        }) {
            used[prev] = true;
            chain.push_front(prev);
        }
        chains.push(chain.into());
    }
    Ok(chains)
}

/// LCSS similarity: matched points must agree within `eps` on both axes and
/// lie at most `delta` indices apart. Normalized by the shorter length.
pub fn lcss_similarity(a: &[TrackPoint], b: &[TrackPoint], eps: f64, delta: usize) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let m = b.len();
    let mut prev = vec![0u32; m + 1];
    let mut cur = vec![0u32; m + 1];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            cur[j + 1] = if i.abs_diff(j) <= delta && (pa.x - pb.x).abs() <= eps && (pa.y - pb.y).abs() <= eps {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m] as f64 / a.len().min(b.len()) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackCluster {
    pub center: Track,
    /// Indices into the clustered track list.
    pub member_ids: Vec<usize>,
    pub members: Vec<Track>,
}

impl TrackCluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Least-squares polynomial coefficients of `ys` over `xs`, lowest first.
fn polyfit(xs: &[f64], ys: &[f64], order: usize) -> Vec<f64> {
    let a = DMatrix::from_fn(xs.len(), order + 1, |r, c| xs[r].powi(c as i32));
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    svd.solve(&b, 1e-12)
        .expect("both singular vector sets were computed")
        .iter()
        .copied()
        .collect()
}

fn polyval(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// LCSS correspondence between two point lists (no index window): matched
/// index pairs in order.
fn lcss_pairs(a: &[(f64, f64)], b: &[(f64, f64)], eps: f64) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let close = |i: usize, j: usize| (a[i].0 - b[j].0).abs() <= eps && (a[i].1 - b[j].1).abs() <= eps;
    let mut table = vec![0u32; (n + 1) * (m + 1)];
    for i in 0..n {
        for j in 0..m {
            table[(i + 1) * (m + 1) + j + 1] = if close(i, j) {
                table[i * (m + 1) + j] + 1
            } else {
                table[i * (m + 1) + j + 1].max(table[(i + 1) * (m + 1) + j])
            };
        }
    }
    let (mut i, mut j) = (n, m);
    let mut pairs = Vec::new();
    while i > 0 && j > 0 {
        if close(i - 1, j - 1) && table[i * (m + 1) + j] == table[(i - 1) * (m + 1) + j - 1] + 1 {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if table[(i - 1) * (m + 1) + j] >= table[i * (m + 1) + j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

/// New center: every member resampled by arc length, points pooled over the
/// normalized arc parameter, and `x(tau)`, `y(tau)` fit by polynomials.
///
/// A member point takes the arc parameter of the current center point it is
/// matched to under LCSS, so members that enter the flow at different
/// places (a circulating crowd) are pooled in phase. Members with no match
/// fall back to their own arc parameter. The current center is pooled as
/// well, which keeps the fit anchored where few members match.
pub fn refit_center(center: &Track, members: &[Track], params: &AdvectionParams) -> Track {
    let n = params.resample_points;
    let order = params.poly_order.min(n - 1);
    let reference = center.resample(n);
    let mut taus: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let mut xs: Vec<f64> = reference.iter().map(|p| p.0).collect();
    let mut ys: Vec<f64> = reference.iter().map(|p| p.1).collect();
    for m in members {
        let pts = m.resample(n);
        let pairs = lcss_pairs(&reference, &pts, params.lcss_eps);
        if pairs.is_empty() {
            for (i, &(x, y)) in pts.iter().enumerate() {
                taus.push(i as f64 / (n - 1) as f64);
                xs.push(x);
                ys.push(y);
            }
        }
        for (i, j) in pairs {
            taus.push(i as f64 / (n - 1) as f64);
            xs.push(pts[j].0);
            ys.push(pts[j].1);
        }
    }
    let (cx, cy) = (polyfit(&taus, &xs, order), polyfit(&taus, &ys, order));
    let t_start = members.iter().map(|m| m.start().t as f64).sum::<f64>() / members.len() as f64;
    let t_end = members.iter().map(|m| m.end().t as f64).sum::<f64>() / members.len() as f64;
    Track::new(
        (0..n)
            .map(|i| {
                let tau = i as f64 / (n - 1) as f64;
                TrackPoint {
                    x: polyval(&cx, tau),
                    y: polyval(&cy, tau),
                    t: (t_start + tau * (t_end - t_start)).round() as u64,
                }
            })
            .collect(),
    )
}

/// Sort tracks by length (longest first), seed one cluster with the longest,
/// then repeatedly take the shortest remaining track and add it to the most
/// similar cluster center scoring above `sim_threshold`, or open a new
/// cluster. A cluster with more than `s` members has its center refit after
/// every assignment.
pub fn cluster_tracks(tracks: &[Track], params: &AdvectionParams) -> Result<Vec<TrackCluster>> {
    params.validate()?;
    if tracks.is_empty() {
        return Err(Error::param("no tracks to cluster"));
    }
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by(|&a, &b| tracks[b].length().total_cmp(&tracks[a].length()).then(a.cmp(&b)));
    let first = order[0];
    let mut clusters = vec![TrackCluster {
        center: tracks[first].clone(),
        member_ids: vec![first],
        members: vec![tracks[first].clone()],
    }];
    // Refit centers are arc-length resampled, so every comparison is made
    // between curves resampled the same way; sampling rate then no longer
    // depends on how fast a track was traversed.
    let shape = |t: &Track| -> Vec<TrackPoint> {
        t.resample(params.resample_points)
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| TrackPoint { x, y, t: i as u64 })
            .collect()
    };
    let mut centers = vec![shape(&tracks[first])];
    for &id in order[1..].iter().rev() {
        let track = &tracks[id];
        let probe = shape(track);
        let mut best: Option<(f64, usize)> = None;
        for (c, center) in centers.iter().enumerate() {
            let sim = lcss_similarity(&probe, center, params.lcss_eps, params.lcss_delta);
            if sim > params.sim_threshold && best.map_or(true, |(b, _)| sim > b) {
                best = Some((sim, c));
            }
        }
        match best {
            Some((_, c)) => {
                let cluster = &mut clusters[c];
                cluster.member_ids.push(id);
                cluster.members.push(track.clone());
                if cluster.size() > params.s {
                    cluster.center = refit_center(&cluster.center, &cluster.members, params);
                    centers[c] = shape(&cluster.center);
                }
            }
            None => {
                clusters.push(TrackCluster {
                    center: track.clone(),
                    member_ids: vec![id],
                    members: vec![track.clone()],
                });
                centers.push(probe);
            }
        }
    }
    Ok(clusters)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    /// Index into the clustered list.
    pub cluster: usize,
    pub source: (f64, f64),
    pub source_radius: f64,
    pub sink: (f64, f64),
    pub sink_radius: f64,
    pub members: usize,
    pub direction_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSinkReport {
    pub flows: Vec<FlowSummary>,
}

fn centroid_and_rms(points: &[(f64, f64)]) -> ((f64, f64), f64) {
    let n = points.len() as f64;
    let c = (
        points.iter().map(|p| p.0).sum::<f64>() / n,
        points.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let rms = (points.iter().map(|&p| dist(p, c).powi(2)).sum::<f64>() / n).sqrt();
    (c, rms)
}

/// Entry and exit summary of every cluster with at least `min_members`.
pub fn sources_sinks(clusters: &[TrackCluster], min_members: usize) -> Result<SourceSinkReport> {
    if clusters.is_empty() {
        return Err(Error::param("no clusters"));
    }
    let flows: Vec<FlowSummary> = clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.size() >= min_members)
        .map(|(i, c)| {
            let starts: Vec<_> = c.members.iter().map(|m| m.start().xy()).collect();
            let ends: Vec<_> = c.members.iter().map(|m| m.end().xy()).collect();
            let (source, source_radius) = centroid_and_rms(&starts);
            let (sink, sink_radius) = centroid_and_rms(&ends);
            let (s, e) = (c.center.start(), c.center.end());
            FlowSummary {
                cluster: i,
                source,
                source_radius,
                sink,
                sink_radius,
                members: c.size(),
                direction_deg: (e.y - s.y).atan2(e.x - s.x).to_degrees(),
            }
        })
        .collect();
    if flows.is_empty() {
        return Err(Error::NoDominantFlows);
    }
    Ok(SourceSinkReport { flows })
}

/// Total signed turning of a track about `center`, in degrees.
pub fn winding_angle(track: &Track, center: (f64, f64)) -> f64 {
    track
        .points
        .windows(2)
        .map(|w| {
            let a0 = (w[0].y - center.1).atan2(w[0].x - center.0);
            let a1 = (w[1].y - center.1).atan2(w[1].x - center.0);
            let d = (a1 - a0).rem_euclid(2.0 * PI);
            if d > PI { d - 2.0 * PI } else { d }
        })
        .sum::<f64>()
        .to_degrees()
}

/// `track_id,point_idx,x,y,t` rows.
pub fn tracks_csv(tracks: &[Track]) -> String {
    let mut out = String::from("track_id,point_idx,x,y,t\n");
    for (id, t) in tracks.iter().enumerate() {
        for (i, p) in t.points.iter().enumerate() {
            let _ = writeln!(out, "{id},{i},{:.3},{:.3},{}", p.x, p.y, p.t);
        }
    }
    out
}

/// Members in their cluster color, dominant centers in white.
pub fn overlay(width: usize, height: usize, clusters: &[TrackCluster], min_members: usize) -> Vec<Rgb> {
    let mut canvas = Raster::filled(width, height, [20u8, 20, 20]);
    let pts = |t: &Track| -> Vec<(f64, f64)> { t.points.iter().map(TrackPoint::xy).collect() };
    for (i, c) in clusters.iter().enumerate() {
        let color = if c.size() >= min_members {
            crate::flowseg::PALETTE[i % crate::flowseg::PALETTE.len()]
        } else {
            [90, 90, 90]
        };
        for m in &c.members {
            draw_polyline(&mut canvas, &pts(m), color);
        }
    }
    for c in clusters.iter().filter(|c| c.size() >= min_members) {
        draw_polyline(&mut canvas, &pts(&c.center), [255, 255, 255]);
    }
    canvas.into_data()
}
