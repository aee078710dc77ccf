//! Binary morphology with a square `(2r+1) x (2r+1)` structuring element.
//!
//! Both primitives only look at the in-bounds part of the window. That makes
//! erosion and dilation an adjoint pair on the finite grid, so
//! `open(m) ⊆ m ⊆ close(m)` and idempotence hold right up to the border.

use super::{BinaryMask, Raster};

fn sweep(mask: &BinaryMask, radius: usize, want: bool) -> BinaryMask {
    // `want = true` is dilation (any set), `false` is erosion (all set).
    let (w, h) = mask.dims();
    let r = radius as isize;
    let pass = |src: &BinaryMask, dx: isize, dy: isize| {
        Raster::from_fn(w, h, |x, y| {
            let hit = (-r..=r).any(|k| {
                let xx = x as isize + k * dx;
                let yy = y as isize + k * dy;
                xx >= 0
                    && yy >= 0
                    && (xx as usize) < w
                    && (yy as usize) < h
                    && src.get(xx as usize, yy as usize) == want
            });
            if hit {
                want
            } else {
                !want
            }
        })
    };
    let rows = pass(mask, 1, 0);
    pass(&rows, 0, 1)
}

pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    sweep(mask, radius, false)
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    sweep(mask, radius, true)
}

/// `dilate(erode(m))`. Radius 0 is the identity.
pub fn morph_open(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

/// `erode(dilate(m))`. Radius 0 is the identity.
pub fn morph_close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    erode(&dilate(mask, radius), radius)
}
