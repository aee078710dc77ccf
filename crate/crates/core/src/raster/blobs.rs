use super::{BinaryMask, LabelMap, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    /// Offsets of already-visited neighbors in a raster scan.
    fn back_neighbors(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub label: u32,
    pub area: usize,
    /// `(min_x, min_y, max_x, max_y)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        parent[i as usize] = parent[parent[i as usize] as usize];
        i = parent[i as usize];
    }
    i
}

/// Two-pass union-find labelling of regions of equal nonzero class.
///
/// Pixels with class 0 are unlabelled. Returns the region map (ids `1..=n`,
/// numbered in raster order of each region's first pixel) and `n`.
pub fn label_regions(classes: &Raster<u32>, connectivity: Connectivity) -> (LabelMap, usize) {
    let (w, h) = classes.dims();
    let cls = classes.data();
    let mut provisional = vec![0u32; w * h];
    // parent[0] is a dummy so provisional ids start at 1.
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let c = cls[i];
            if c == 0 {
                continue;
            }
            let mut current = 0u32;
            for &(dx, dy) in connectivity.back_neighbors() {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx as usize >= w {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if cls[j] != c {
                    continue;
                }
                let other = find(&mut parent, provisional[j]);
                if current == 0 {
                    current = other;
                } else if other != current {
                    let (lo, hi) = (current.min(other), current.max(other));
                    parent[hi as usize] = lo;
                    current = lo;
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            provisional[i] = current;
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut next = 0u32;
    for p in provisional.iter_mut() {
        if *p == 0 {
            continue;
        }
        let root = find(&mut parent, *p) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
        }
        *p = remap[root];
    }
    (
        Raster::from_vec(w, h, provisional).expect("same dimensions"),
        next as usize,
    )
}

/// Label the set pixels of `mask` and gather per-blob statistics.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<Blob>, LabelMap) {
    let classes = mask.map(|b| b as u32);
    let (labels, n) = label_regions(&classes, connectivity);
    let mut blobs: Vec<Blob> = (1..=n as u32)
        .map(|label| Blob {
            label,
            area: 0,
            bbox: (usize::MAX, usize::MAX, 0, 0),
            centroid: (0.0, 0.0),
        })
        .collect();
    let w = labels.width();
    for (i, &l) in labels.data().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let b = &mut blobs[l as usize - 1];
        b.area += 1;
        b.bbox.0 = b.bbox.0.min(x);
        b.bbox.1 = b.bbox.1.min(y);
        b.bbox.2 = b.bbox.2.max(x);
        b.bbox.3 = b.bbox.3.max(y);
        b.centroid.0 += x as f64;
        b.centroid.1 += y as f64;
    }
    for b in &mut blobs {
        b.centroid.0 /= b.area as f64;
        b.centroid.1 /= b.area as f64;
    }
    (blobs, labels)
}
