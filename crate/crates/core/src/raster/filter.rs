use super::{Raster, ScalarField};
use crate::error::{Error, Result};

/// Discrete Gaussian truncated at `ceil(3 sigma)` and normalized to unit sum.
/// `sigma == 0` yields the single-tap identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_smooth(field: &ScalarField, sigma: f64) -> Result<ScalarField> {
    let kernel = gaussian_kernel(sigma)?;
    if kernel.len() == 1 {
        return Ok(field.clone());
    }
    let r = (kernel.len() / 2) as isize;
    let (w, h) = field.dims();
    let horizontal = Raster::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * field.get_clamped(x as isize + i as isize - r, y as isize))
            .sum::<f64>()
    });
    Ok(Raster::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * horizontal.get_clamped(x as isize, y as isize + i as isize - r))
            .sum::<f64>()
    }))
}

/// Median over the `(2r+1)^2` window with replicated borders.
pub fn median_filter(field: &ScalarField, radius: usize) -> ScalarField {
    if radius == 0 {
        return field.clone();
    }
    let r = radius as isize;
    let mid = ((2 * radius + 1) * (2 * radius + 1)) / 2;
    let mut window = Vec::with_capacity(mid * 2 + 1);
    let (w, h) = field.dims();
    Raster::from_fn(w, h, |x, y| {
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(field.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        *window.select_nth_unstable_by(mid, f64::total_cmp).1
    })
}
