//! Dominant-flow segmentation and per-segment people counting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::motion::MotionFlowField;
use crate::raster::{
    connected_components, label_regions, BinaryMask, Connectivity, Frame, LabelMap, Raster, Rgb,
};

const MAX_LLOYD_ITERATIONS: usize = 100;

/// Per-pixel flow-cluster labels: 0 is background, `1..=k` are segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabeling {
    pub labels: LabelMap,
    pub k: usize,
    /// Unit mean direction of each cluster, indexed by `label - 1`.
    pub centroids: Vec<(f64, f64)>,
}

impl SegmentLabeling {
    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    /// Pixel count of every label value `0..=k`.
    pub fn label_areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.k + 1];
        for &l in self.labels.data() {
            areas[l as usize] += 1;
        }
        areas
    }

    /// Nonzero labels that still own at least one pixel.
    pub fn active_segments(&self) -> Vec<u32> {
        self.label_areas()
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &a)| a > 0)
            .map(|(l, _)| l as u32)
            .collect()
    }
}

fn unit(u: f64, v: f64) -> (f64, f64) {
    let a = v.atan2(u);
    (a.cos(), a.sin())
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Spherical Lloyd iterations over unit direction features.
pub(crate) struct KmeansRun {
    pub assignment: Vec<usize>,
    pub centroids: Vec<(f64, f64)>,
    /// Objective after every assignment step.
    #[cfg_attr(not(test), allow(dead_code))]
    pub objective: Vec<f64>,
}

fn nearest(x: (f64, f64), centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centroids.iter().enumerate() {
        let d = dist2(x, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn seed_centroids(features: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = vec![features[rng.gen_range(0..features.len())]];
    let mut d2: Vec<f64> = features.iter().map(|&f| dist2(f, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = features.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..features.len())
        };
        let c = features[pick];
        centroids.push(c);
        for (d, &f) in d2.iter_mut().zip(features) {
            *d = d.min(dist2(f, c));
        }
    }
    centroids
}

pub(crate) fn spherical_kmeans(features: &[(f64, f64)], k: usize, seed: u64) -> KmeansRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(features, k, &mut rng);
    let mut assignment: Vec<usize> = features.iter().map(|&f| nearest(f, &centroids)).collect();
    let objective_of = |a: &[usize], c: &[(f64, f64)]| -> f64 {
        features.iter().zip(a).map(|(&f, &j)| dist2(f, c[j])).sum()
    };
    let mut objective = vec![objective_of(&assignment, &centroids)];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        // Fixed-order sums keep the result bit-stable.
        let mut sums = vec![(0.0, 0.0); k];
        for (&f, &j) in features.iter().zip(&assignment) {
            sums[j].0 += f.0;
            sums[j].1 += f.1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            let norm = s.0.hypot(s.1);
            // Empty or perfectly cancelling clusters keep their centroid.
            if norm > 1e-12 {
                *c = (s.0 / norm, s.1 / norm);
            }
        }
        let next: Vec<usize> = features.iter().map(|&f| nearest(f, &centroids)).collect();
        let stable = next == assignment;
        assignment = next;
        objective.push(objective_of(&assignment, &centroids));
        if stable {
            break;
        }
    }
    KmeansRun {
        assignment,
        centroids,
        objective,
    }
}

/// Cluster the flow vectors by orientation into `k` segments.
pub fn kmeans_flow(mff: &MotionFlowField, dims: (usize, usize), k: usize, seed: u64) -> Result<SegmentLabeling> {
    if mff.is_empty() {
        return Err(Error::NoMotion);
    }
    if k < 1 {
        return Err(Error::param("K must be >= 1"));
    }
    if k > mff.len() {
        return Err(Error::param(format!(
            "K = {k} exceeds the {} available flow vectors",
            mff.len()
        )));
    }
    let (w, h) = dims;
    if let Some(f) = mff.vectors.iter().find(|f| f.x >= w || f.y >= h) {
        return Err(Error::param(format!(
            "flow vector at ({}, {}) outside {w}x{h}",
            f.x, f.y
        )));
    }
    let features: Vec<(f64, f64)> = mff.vectors.iter().map(|f| unit(f.u, f.v)).collect();
    let run = spherical_kmeans(&features, k, seed);
    let mut labels = Raster::filled(w, h, 0u32);
    for (f, &j) in mff.vectors.iter().zip(&run.assignment) {
        labels.set(f.x, f.y, j as u32 + 1);
    }
    Ok(SegmentLabeling {
        labels,
        k,
        centroids: run.centroids,
    })
}

/// 8-neighborhood border of a region, as pixel indices.
fn region_border(regions: &LabelMap, id: u32, pixels: &[usize]) -> Vec<usize> {
    let (w, h) = regions.dims();
    let mut seen = std::collections::BTreeSet::new();
    for &i in pixels {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if regions.data()[j] != id {
                    seen.insert(j);
                }
            }
        }
    }
    seen.into_iter().collect()
}

/// Label that should swallow a region, given the labels on its border.
fn absorber(border_labels: &[u32], areas: &[usize]) -> u32 {
    let mut votes = vec![0usize; areas.len()];
    for &l in border_labels {
        votes[l as usize] += 1;
    }
    let mut best = 0u32;
    for l in 1..votes.len() as u32 {
        let (lv, bv) = (votes[l as usize], votes[best as usize]);
        // Majority, then the larger global segment; remaining ties stay with
        // background or the lower label.
        if lv > bv || (lv == bv && lv > 0 && areas[l as usize] > areas[best as usize]) {
            best = l;
        }
    }
    best
}

/// Repeatedly hand every sub-`min_area` segment component (8-connected) to
/// the label dominating its border, smallest component first, until none
/// remain. Background is never absorbed itself but may absorb.
pub fn blob_absorption(seg: &SegmentLabeling, min_area: usize) -> Result<SegmentLabeling> {
    if min_area < 1 {
        return Err(Error::param("min_area must be >= 1"));
    }
    let mut labels = seg.labels.clone();
    loop {
        let (regions, n) = label_regions(&labels, Connectivity::Eight);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (i, &r) in regions.data().iter().enumerate() {
            if r != 0 {
                members[r as usize].push(i);
            }
        }
        let mut small: Vec<u32> = (1..=n as u32)
            .filter(|&r| members[r as usize].len() < min_area)
            .collect();
        // Region ids follow raster order, so this is (area, first pixel).
        small.sort_by_key(|&r| (members[r as usize].len(), r));
        let mut areas = vec![0usize; seg.k + 1];
        for &l in labels.data() {
            areas[l as usize] += 1;
        }
        let target = small.into_iter().find_map(|r| {
            let border = region_border(&regions, r, &members[r as usize]);
            (!border.is_empty()).then(|| {
                let border_labels: Vec<u32> = border.iter().map(|&j| labels.data()[j]).collect();
                (r, absorber(&border_labels, &areas))
            })
        });
        let Some((r, into)) = target else {
            break;
        };
        for &i in &members[r as usize] {
            labels.data_mut()[i] = into;
        }
    }
    Ok(SegmentLabeling {
        labels,
        k: seg.k,
        centroids: seg.centroids.clone(),
    })
}

/// Estimated pixel area of one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumBlobSize {
    pub a_prime: f64,
    pub per_frame_sizes: Vec<f64>,
    pub sample_frames: Vec<usize>,
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) as f64
    }
}

/// Median foreground blob area of one mask, or `None` without blobs.
pub fn frame_blob_size(mask: &BinaryMask) -> Option<f64> {
    let (blobs, _) = connected_components(mask, Connectivity::Eight);
    if blobs.is_empty() {
        return None;
    }
    let mut areas: Vec<usize> = blobs.iter().map(|b| b.area).collect();
    areas.sort_unstable();
    Some(median(&areas))
}

/// Draw `sample_count` distinct frames at random (frames without blobs are
/// replaced by further draws) and average their per-frame blob sizes.
pub fn optimum_blob_size(fg_masks: &[BinaryMask], sample_count: usize, seed: u64) -> Result<OptimumBlobSize> {
    if !(4..=5).contains(&sample_count) {
        return Err(Error::param("sample_count must be 4 or 5"));
    }
    if fg_masks.len() < sample_count {
        return Err(Error::param(format!(
            "need at least {sample_count} frames, got {}",
            fg_masks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..fg_masks.len()).collect();
    // Partial Fisher-Yates: each step is one more random draw.
    let mut sample_frames = Vec::with_capacity(sample_count);
    let mut per_frame_sizes = Vec::with_capacity(sample_count);
    for i in 0..order.len() {
        if sample_frames.len() == sample_count {
            break;
        }
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
        if let Some(size) = frame_blob_size(&fg_masks[order[i]]) {
            sample_frames.push(order[i]);
            per_frame_sizes.push(size);
        }
    }
    if sample_frames.len() < sample_count {
        return Err(Error::param(format!(
            "only {} frames contain foreground blobs, need {sample_count}",
            sample_frames.len()
        )));
    }
    let a_prime = per_frame_sizes.iter().sum::<f64>() / sample_count as f64;
    Ok(OptimumBlobSize {
        a_prime,
        per_frame_sizes,
        sample_frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCount {
    pub label: u32,
    /// Blobs retained after the size cutoff.
    pub blobs: usize,
    pub people: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub t: u64,
    pub per_segment: Vec<SegmentCount>,
    pub total: u64,
}

/// People per segment from the blobs of `f_out AND segment`.
pub fn count_people(
    seg: &SegmentLabeling,
    f_out: &BinaryMask,
    a_prime: f64,
    max_blob_area: usize,
    t: u64,
) -> Result<CountReport> {
    if !(a_prime > 0.0) {
        return Err(Error::param(format!("A' must be > 0, got {a_prime}")));
    }
    check_dims(seg.dims(), f_out.dims())?;
    let per_segment: Vec<SegmentCount> = (1..=seg.k as u32)
        .map(|label| {
            let mask = Raster::from_fn(f_out.width(), f_out.height(), |x, y| {
                f_out.get(x, y) && seg.labels.get(x, y) == label
            });
            let (blobs, _) = connected_components(&mask, Connectivity::Eight);
            let kept: Vec<usize> = blobs
                .iter()
                .map(|b| b.area)
                .filter(|&a| a <= max_blob_area)
                .collect();
            let people = kept
                .iter()
                .map(|&a| ((a as f64 / a_prime).round() as u64).max(1))
                .sum();
            SegmentCount {
                label,
                blobs: kept.len(),
                people,
            }
        })
        .collect();
    let total = per_segment.iter().map(|s| s.people).sum();
    Ok(CountReport {
        t,
        per_segment,
        total,
    })
}

/// One line of the segmentation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub label: u32,
    pub pixel_area: usize,
    pub direction_deg: f64,
    pub people: u64,
}

pub fn segment_records(seg: &SegmentLabeling, counts: &CountReport) -> Vec<SegmentRecord> {
    let areas = seg.label_areas();
    seg.active_segments()
        .into_iter()
        .map(|label| {
            let (cx, cy) = seg.centroids[label as usize - 1];
            SegmentRecord {
                label,
                pixel_area: areas[label as usize],
                direction_deg: cy.atan2(cx).to_degrees(),
                people: counts
                    .per_segment
                    .iter()
                    .find(|s| s.label == label)
                    .map_or(0, |s| s.people),
            }
        })
        .collect()
}

pub const PALETTE: [Rgb; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Segments painted over the dimmed frame.
pub fn overlay(frame: &Frame, seg: &SegmentLabeling) -> Vec<Rgb> {
    frame
        .samples()
        .iter()
        .zip(seg.labels.data())
        .map(|(&s, &l)| {
            if l == 0 {
                let g = (s * 160.0).round() as u8;
                [g, g, g]
            } else {
                PALETTE[(l as usize - 1) % PALETTE.len()]
            }
        })
        .collect()
}
