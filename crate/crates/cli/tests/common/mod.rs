//! Synthetic footage with known ground truth.
#![allow(dead_code)]

use crowdkit::raster::{BinaryMask, Frame, Raster};

/// A textured disk: the shading moves with the disk so the flow is
/// observable inside it, not only on its rim.
#[derive(Debug, Clone, Copy)]
pub struct Disk {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Disk {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (x as f64 - self.x).powi(2) + (y as f64 - self.y).powi(2) <= self.r * self.r
    }

    fn shade(&self, x: usize, y: usize) -> f64 {
        let (dx, dy) = (x as f64 - self.x, y as f64 - self.y);
        0.75 + 0.1 * (0.9 * dx).sin() * (0.7 * dy).cos()
    }
}

fn background(x: usize, y: usize) -> f64 {
    0.15 + 0.03 * (((x / 3) + (y / 5)) % 3) as f64
}

pub fn render(t: u64, w: usize, h: usize, disks: &[Disk]) -> Frame {
    let r = Raster::from_fn(w, h, |x, y| {
        disks
            .iter()
            .find(|d| d.contains(x, y))
            .map_or(background(x, y), |d| d.shade(x, y))
    });
    Frame::from_raster(t, r).unwrap()
}

pub fn disk_mask(w: usize, h: usize, disks: &[Disk]) -> BinaryMask {
    Raster::from_fn(w, h, |x, y| disks.iter().any(|d| d.contains(x, y)))
}

pub const LANES_W: usize = 160;
pub const LANES_H: usize = 120;

pub const LANE_RADIUS: f64 = 8.0;
// Irregular spacing, so no frame repeats the first one and the background
// model never sees a disk return to a remembered place.
const LANE_OFFSETS: [f64; 3] = [0.0, 71.0, 139.0];

/// Disks of the two lanes at time `t`: the upper lane moves right, the
/// lower one left, both at one pixel per frame.
pub fn lane_disks(t: u64) -> [Vec<Disk>; 2] {
    let span = LANES_W as f64 + 40.0;
    let lane = |y: f64, dir: f64, phase: f64| -> Vec<Disk> {
        LANE_OFFSETS
            .iter()
            .map(|&o| {
                let x = (phase + o + dir * t as f64).rem_euclid(span) - 20.0;
                Disk { x, y, r: LANE_RADIUS }
            })
            .collect()
    };
    [lane(35.0, 1.0, 0.0), lane(85.0, -1.0, 17.0)]
}

pub fn lanes_video(frames: usize) -> Vec<Frame> {
    (0..frames as u64)
        .map(|t| {
            let [a, b] = lane_disks(t);
            render(t, LANES_W, LANES_H, &[a, b].concat())
        })
        .collect()
}

pub const CROWD_W: usize = 240;
pub const CROWD_H: usize = 180;
pub const CROWD_RADIUS: f64 = 10.0;

/// Fifteen walkers, one per cell of a 5x3 lattice, each circling the
/// center of its own cell so they never touch. Phases and turning senses
/// vary per walker. At one pixel per frame a lap takes about 82 frames;
/// keep runs well short of that, since a walker coming back to where it
/// stood in the first frame meets the background model's memory of it.
pub fn crowd_disks(t: u64) -> Vec<Disk> {
    let (cw, ch) = (CROWD_W as f64 / 5.0, CROWD_H as f64 / 3.0);
    let orbit = 13.0;
    (0..15)
        .map(|i| {
            let sense = if i % 2 == 0 { 1.0 } else { -1.0 };
            let a = 0.9 * i as f64 + sense / orbit * t as f64;
            let (cx, cy) = (((i % 5) as f64 + 0.5) * cw, ((i / 5) as f64 + 0.5) * ch);
            Disk { x: cx + orbit * a.cos(), y: cy + orbit * a.sin(), r: CROWD_RADIUS }
        })
        .collect()
}

pub fn crowd_video(frames: usize) -> Vec<Frame> {
    (0..frames as u64)
        .map(|t| render(t, CROWD_W, CROWD_H, &crowd_disks(t)))
        .collect()
}

/// A textured horizontal band sliding by `speed` px/frame over a flat
/// background.
pub fn band_video(frames: usize, w: usize, h: usize, band: (usize, usize), speed: f64) -> Vec<Frame> {
    (0..frames as u64)
        .map(|t| {
            let r = Raster::from_fn(w, h, |x, y| {
                if (band.0..band.1).contains(&y) {
                    let x = x as f64 - speed * t as f64;
                    0.55 + 0.25 * (x * 0.45).sin() * (y as f64 * 0.9).cos()
                } else {
                    0.15
                }
            });
            Frame::from_raster(t, r).unwrap()
        })
        .collect()
}
