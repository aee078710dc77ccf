//! Dense optical flow (Horn–Schunck) and the per-frame motion flow field.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::raster::{gaussian_smooth, BinaryMask, Frame, Raster, ScalarField};

/// Per-pixel velocity in pixels/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: ScalarField,
    pub v: ScalarField,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            u: Raster::filled(width, height, 0.0),
            v: Raster::filled(width, height, 0.0),
        }
    }

    pub fn new(u: ScalarField, v: ScalarField) -> Result<Self> {
        check_dims(u.dims(), v.dims())?;
        if u.data().iter().chain(v.data()).any(|x| !x.is_finite()) {
            return Err(Error::param("flow contains non-finite values"));
        }
        Ok(Self { u, v })
    }

    /// Field defined by a closure of pixel coordinates.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let u = Raster::from_fn(width, height, |x, y| f(x as f64, y as f64).0);
        let v = Raster::from_fn(width, height, |x, y| f(x as f64, y as f64).1);
        Self { u, v }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.u.dims()
    }

    /// Bilinear sample at a subpixel position, clamped to the grid.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = self.dims();
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let lerp = |r: &ScalarField| {
            let top = r.get(x0, y0) * (1.0 - fx) + r.get(x1, y0) * fx;
            let bottom = r.get(x0, y1) * (1.0 - fx) + r.get(x1, y1) * fx;
            top * (1.0 - fy) + bottom * fy
        };
        (lerp(&self.u), lerp(&self.v))
    }
}

pub fn flow_magnitude(flow: &FlowField) -> ScalarField {
    let (w, h) = flow.dims();
    Raster::from_fn(w, h, |x, y| {
        let (u, v) = (flow.u.get(x, y), flow.v.get(x, y));
        (u * u + v * v).sqrt()
    })
}

/// `atan2(v, u)` in `(-pi, pi]`, and 0 wherever the flow vanishes.
pub fn flow_orientation(flow: &FlowField) -> ScalarField {
    let (w, h) = flow.dims();
    Raster::from_fn(w, h, |x, y| orientation(flow.u.get(x, y), flow.v.get(x, y)))
}

#[inline]
fn orientation(u: f64, v: f64) -> f64 {
    if u == 0.0 && v == 0.0 {
        0.0
    } else {
        let a = v.atan2(u);
        // atan2 returns -pi for (negative u, -0.0 v); fold onto +pi.
        if a == -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsParams {
    /// Smoothness weight, in 8-bit intensity units.
    pub alpha: f64,
    pub iterations: usize,
    /// Gaussian pre-smoothing of both frames before differentiation.
    pub presmooth_sigma: f64,
    /// Early stop once the mean per-pixel update falls below this (px/frame).
    pub tolerance: f64,
}

impl Default for HsParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            iterations: 100,
            presmooth_sigma: 1.0,
            tolerance: 1e-4,
        }
    }
}

impl HsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::param("alpha must be > 0"));
        }
        if self.iterations < 1 {
            return Err(Error::param("iterations must be >= 1"));
        }
        if !(self.presmooth_sigma >= 0.0) {
            return Err(Error::param("presmooth_sigma must be >= 0"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::param("tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// Luminance scale applied before differentiation so `alpha` is expressed in
/// the conventional 8-bit units.
const INTENSITY_SCALE: f64 = 255.0;

/// Neighbor weights of the classical averaging stencil.
const STENCIL: [(isize, isize, f64); 8] = [
    (-1, 0, 1.0 / 6.0),
    (1, 0, 1.0 / 6.0),
    (0, -1, 1.0 / 6.0),
    (0, 1, 1.0 / 6.0),
    (-1, -1, 1.0 / 12.0),
    (1, -1, 1.0 / 12.0),
    (-1, 1, 1.0 / 12.0),
    (1, 1, 1.0 / 12.0),
];

/// Precomputed derivatives for one frame pair.
///
/// The solver minimizes
/// `E = sum_p (Ix u + Iy v + It)^2 + alpha^2 sum_{p~q} w_pq (|u_p-u_q|^2 + |v_p-v_q|^2)`
/// over unordered stencil pairs. At the border only in-bounds neighbors take
/// part, and each Jacobi update is the exact per-pixel minimizer given its
/// neighbors, so the iteration never increases `E`.
pub struct HornSchunck {
    params: HsParams,
    ix: ScalarField,
    iy: ScalarField,
    it: ScalarField,
}

impl HornSchunck {
    pub fn new(prev: &Frame, next: &Frame, params: HsParams) -> Result<Self> {
        check_dims(prev.dims(), next.dims())?;
        params.validate()?;
        let a = gaussian_smooth(prev.raster(), params.presmooth_sigma)?;
        let b = gaussian_smooth(next.raster(), params.presmooth_sigma)?;
        let (w, h) = a.dims();
        let cdx = |f: &ScalarField, x: usize, y: usize| {
            0.5 * (f.get_clamped(x as isize + 1, y as isize) - f.get_clamped(x as isize - 1, y as isize))
        };
        let cdy = |f: &ScalarField, x: usize, y: usize| {
            0.5 * (f.get_clamped(x as isize, y as isize + 1) - f.get_clamped(x as isize, y as isize - 1))
        };
        let s = INTENSITY_SCALE;
        let ix = Raster::from_fn(w, h, |x, y| 0.5 * s * (cdx(&a, x, y) + cdx(&b, x, y)));
        let iy = Raster::from_fn(w, h, |x, y| 0.5 * s * (cdy(&a, x, y) + cdy(&b, x, y)));
        let it = Raster::from_fn(w, h, |x, y| s * (b.get(x, y) - a.get(x, y)));
        Ok(Self { params, ix, iy, it })
    }

    fn neighbors(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (w, h) = self.ix.dims();
        STENCIL.iter().filter_map(move |&(dx, dy, wt)| {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
                .then(|| (ny as usize * w + nx as usize, wt))
        })
    }

    pub fn energy(&self, flow: &FlowField) -> f64 {
        let (w, h) = self.ix.dims();
        let (u, v) = (flow.u.data(), flow.v.data());
        let mut data = 0.0;
        let mut smooth = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let r = self.ix.data()[i] * u[i] + self.iy.data()[i] * v[i] + self.it.data()[i];
                data += r * r;
                for (j, wt) in self.neighbors(x, y) {
                    // Each unordered pair is visited twice.
                    let du = u[i] - u[j];
                    let dv = v[i] - v[j];
                    smooth += 0.5 * wt * (du * du + dv * dv);
                }
            }
        }
        data + self.params.alpha * self.params.alpha * smooth
    }

    /// Run Jacobi sweeps from zero flow.
    pub fn solve(&self) -> FlowField {
        self.solve_from(FlowField::zeros(self.ix.width(), self.ix.height()), self.params.iterations)
    }

    pub fn solve_from(&self, init: FlowField, iterations: usize) -> FlowField {
        let (w, h) = self.ix.dims();
        let a2 = self.params.alpha * self.params.alpha;
        let (gx, gy, gt) = (self.ix.data(), self.iy.data(), self.it.data());
        // Per-pixel stencil mass and update denominator never change.
        let mut kappa = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                kappa[y * w + x] = self.neighbors(x, y).map(|(_, wt)| wt).sum();
            }
        }
        let denom: Vec<f64> = (0..w * h).map(|i| a2 * kappa[i] + gx[i] * gx[i] + gy[i] * gy[i]).collect();
        let interior = |x: usize, y: usize| x > 0 && y > 0 && x + 1 < w && y + 1 < h;
        let mut cur = init;
        let mut nxt = cur.clone();
        for _ in 0..iterations {
            let mut total_update = 0.0;
            {
                let (u, v) = (cur.u.data(), cur.v.data());
                let (nu, nv) = (nxt.u.data_mut(), nxt.v.data_mut());
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let (su, sv) = if interior(x, y) {
                            let (n, s) = (i - w, i + w);
                            let edge = |f: &[f64]| f[i - 1] + f[i + 1] + f[n] + f[s];
                            let diag = |f: &[f64]| f[n - 1] + f[n + 1] + f[s - 1] + f[s + 1];
                            (
                                edge(u) / 6.0 + diag(u) / 12.0,
                                edge(v) / 6.0 + diag(v) / 12.0,
                            )
                        } else {
                            self.neighbors(x, y)
                                .fold((0.0, 0.0), |(a, b), (j, wt)| (a + wt * u[j], b + wt * v[j]))
                        };
                        let ubar = su / kappa[i];
                        let vbar = sv / kappa[i];
                        let r = gx[i] * ubar + gy[i] * vbar + gt[i];
                        nu[i] = ubar - gx[i] * r / denom[i];
                        nv[i] = vbar - gy[i] * r / denom[i];
                        let (du, dv) = (nu[i] - u[i], nv[i] - v[i]);
                        total_update += (du * du + dv * dv).sqrt();
                    }
                }
            }
            std::mem::swap(&mut cur, &mut nxt);
            if total_update / ((w * h) as f64) < self.params.tolerance {
                break;
            }
        }
        cur
    }
}

pub fn horn_schunck(prev: &Frame, next: &Frame, alpha: f64, iterations: usize) -> Result<FlowField> {
    let params = HsParams {
        alpha,
        iterations,
        ..HsParams::default()
    };
    horn_schunck_with(prev, next, &params)
}

pub fn horn_schunck_with(prev: &Frame, next: &Frame, params: &HsParams) -> Result<FlowField> {
    Ok(HornSchunck::new(prev, next, *params)?.solve())
}

/// Flow for every consecutive pair of `frames`. Each solve starts from the
/// previous pair's flow; the energy is convex, so this only speeds up
/// convergence toward the same minimizer when the motion is steady.
pub fn horn_schunck_sequence(frames: &[Frame], params: &HsParams) -> Result<Vec<FlowField>> {
    let mut flows: Vec<FlowField> = Vec::with_capacity(frames.len().saturating_sub(1));
    for pair in frames.windows(2) {
        let solver = HornSchunck::new(&pair[0], &pair[1], *params)?;
        let init = match flows.last() {
            Some(f) => f.clone(),
            None => FlowField::zeros(pair[0].width(), pair[0].height()),
        };
        flows.push(solver.solve_from(init, params.iterations));
    }
    Ok(flows)
}

/// Copy of `flow` with every vector shorter than `tau_mag` set to zero.
pub fn suppress_slow(flow: &FlowField, tau_mag: f64) -> FlowField {
    let mag = flow_magnitude(flow);
    let keep = |r: &ScalarField| {
        Raster::from_fn(r.width(), r.height(), |x, y| if mag.get(x, y) >= tau_mag { r.get(x, y) } else { 0.0 })
    };
    FlowField { u: keep(&flow.u), v: keep(&flow.v) }
}

/// One row `(x, y, u, v)` of the motion flow field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowVector {
    pub x: usize,
    pub y: usize,
    pub u: f64,
    pub v: f64,
}

impl FlowVector {
    pub fn orientation(&self) -> f64 {
        orientation(self.u, self.v)
    }
}

/// Flow vectors of the moving foreground pixels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFlowField {
    pub t: u64,
    pub vectors: Vec<FlowVector>,
}

impl MotionFlowField {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The `n x 4` matrix view.
    pub fn rows(&self) -> Vec<[f64; 4]> {
        self.vectors
            .iter()
            .map(|f| [f.x as f64, f.y as f64, f.u, f.v])
            .collect()
    }
}

/// Keep every pixel that is set in `mask` and moves faster than `tau_mag`,
/// in row-major order.
pub fn extract_flow_vectors(flow: &FlowField, mask: &BinaryMask, tau_mag: f64, t: u64) -> Result<MotionFlowField> {
    check_dims(flow.dims(), mask.dims())?;
    if !(tau_mag >= 0.0) {
        return Err(Error::param("tau_mag must be >= 0"));
    }
    let w = flow.width();
    let vectors = mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &set)| {
            let (u, v) = (flow.u.data()[i], flow.v.data()[i]);
            (set && u.hypot(v) > tau_mag).then_some(FlowVector {
                x: i % w,
                y: i / w,
                u,
                v,
            })
        })
        .collect();
    Ok(MotionFlowField { t, vectors })
}

/// Debug rendering: `u` and `v` as 8-bit PGMs plus a sidecar describing the
/// affine map `value = offset + scale * byte`.
pub fn flow_debug_dump(flow: &FlowField) -> (Vec<u8>, Vec<u8>, String) {
    let mut sidecar = String::new();
    let mut encode = |name: &str, r: &ScalarField| {
        let lo = r.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = r.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { (hi - lo) / 255.0 } else { 1.0 };
        let _ = writeln!(sidecar, "{name}_offset = {lo}\n{name}_scale = {scale}");
        let mut out = format!("P5\n{} {}\n255\n", r.width(), r.height()).into_bytes();
        out.extend(r.data().iter().map(|&x| ((x - lo) / scale).round().clamp(0.0, 255.0) as u8));
        out
    };
    let u = encode("u", &flow.u);
    let v = encode("v", &flow.v);
    (u, v, sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn warm_start_converges_faster() {
        let frames: Vec<Frame> = (0..3).map(|t| pattern(40, 32, t as f64, 0.0)).collect();
        let params = HsParams { iterations: 15, ..HsParams::default() };
        let seq = horn_schunck_sequence(&frames, &params).unwrap();
        assert_eq!(seq[0], horn_schunck_with(&frames[0], &frames[1], &params).unwrap());
        let cold = horn_schunck_with(&frames[1], &frames[2], &params).unwrap();
        let err = |f: &FlowField| {
            let n = f.u.len() as f64;
            f.u.data().iter().zip(f.v.data()).map(|(u, v)| (u - 1.0).hypot(*v)).sum::<f64>() / n
        };
        assert!(err(&seq[1]) < err(&cold));
    }

    #[test]
    fn suppress_slow_zeroes_short_vectors() {
        let f = FlowField::from_fn(4, 1, |x, _| (x * 0.5, 0.0));
        let g = suppress_slow(&f, 1.0);
        assert_eq!(g.u.data(), &[0.0, 0.0, 1.0, 1.5]);
    }

    fn pattern(w: usize, h: usize, shift_x: f64, shift_y: f64) -> Frame {
        let r = Raster::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64 - shift_x, y as f64 - shift_y);
            0.5 + 0.2 * (x * 0.35).sin() * (y * 0.3).cos() + 0.15 * ((x + y) * 0.21).sin()
        });
        Frame::from_raster(0, r).unwrap()
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = pattern(20, 16, 0.0, 0.0);
        let flow = horn_schunck(&f, &f, 1.0, 50).unwrap();
        assert!(flow.u.data().iter().chain(flow.v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = Frame::constant(0, 4, 4, 0.0).unwrap();
        let b = Frame::constant(1, 5, 4, 0.0).unwrap();
        assert!(matches!(horn_schunck(&a, &b, 1.0, 1), Err(Error::Dimensions { .. })));
    }

    #[test]
    fn ramp_translation_is_recovered() {
        let (w, h) = (40, 24);
        let ramp = |s: f64| {
            Frame::from_raster(0, Raster::from_fn(w, h, |x, _| (x as f64 - s) / 64.0 + 0.3)).unwrap()
        };
        let flow = horn_schunck(&ramp(0.0), &ramp(1.0), 1.0, 100).unwrap();
        let n = (w * h) as f64;
        let mean_u = flow.u.data().iter().sum::<f64>() / n;
        let mean_abs_v = flow.v.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        assert!((mean_u - 1.0).abs() <= 0.2, "mean u {mean_u}");
        assert!(mean_abs_v <= 0.1, "mean |v| {mean_abs_v}");
    }

    #[test]
    fn energy_does_not_increase() {
        let a = pattern(32, 24, 0.0, 0.0);
        let b = pattern(32, 24, 1.0, 0.5);
        let params = HsParams {
            tolerance: 0.0,
            ..HsParams::default()
        };
        let hs = HornSchunck::new(&a, &b, params).unwrap();
        let mut prev = hs.energy(&FlowField::zeros(32, 24));
        for iters in [1, 10, 50, 100] {
            let e = hs.energy(&hs.solve_from(FlowField::zeros(32, 24), iters));
            assert!(e <= prev + 1e-9 * prev.abs(), "{iters}: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn swapping_frames_negates_flow() {
        let a = pattern(24, 20, 0.0, 0.0);
        let b = pattern(24, 20, 1.0, 0.0);
        let f = horn_schunck(&a, &b, 1.0, 60).unwrap();
        let g = horn_schunck(&b, &a, 1.0, 60).unwrap();
        for (x, y) in f.u.data().iter().zip(g.u.data()) {
            assert!((x + y).abs() < 1e-9);
        }
    }

    #[test]
    fn magnitude_and_orientation_conventions() {
        let mut flow = FlowField::zeros(2, 1);
        flow.u.set(0, 0, 3.0);
        flow.v.set(0, 0, 4.0);
        assert_eq!(flow_magnitude(&flow).get(0, 0), 5.0);
        assert_eq!(flow_magnitude(&flow).get(1, 0), 0.0);
        assert_eq!(flow_orientation(&flow).get(1, 0), 0.0);
        flow.u.set(1, 0, -1.0);
        flow.v.set(1, 0, -0.0);
        assert_eq!(flow_orientation(&flow).get(1, 0), std::f64::consts::PI);
    }

    #[test]
    fn extraction_edge_cases() {
        let flow = FlowField::zeros(4, 3);
        let all = BinaryMask::filled(4, 3, true);
        assert!(extract_flow_vectors(&flow, &all, 0.0, 0).unwrap().is_empty());

        let mut flow = FlowField::zeros(4, 3);
        flow.u.set(2, 1, 0.5);
        flow.v.set(2, 1, -0.25);
        flow.u.set(0, 0, 0.1);
        let mff = extract_flow_vectors(&flow, &all, 0.2, 7).unwrap();
        assert_eq!(mff.rows(), vec![[2.0, 1.0, 0.5, -0.25]]);
        assert_eq!(mff.t, 7);
        assert!(extract_flow_vectors(&flow, &BinaryMask::empty(3, 3), 0.2, 0).is_err());
    }

    #[test]
    fn bilinear_sampling() {
        let flow = FlowField::from_fn(4, 4, |x, y| (x, 2.0 * y));
        assert_eq!(flow.sample(1.5, 2.25), (1.5, 4.5));
        assert_eq!(flow.sample(10.0, -3.0), (3.0, 0.0));
    }

    #[test]
    fn debug_dump_roundtrips_scale() {
        let flow = FlowField::from_fn(3, 2, |x, y| (x - 1.0, y));
        let (u, _v, side) = flow_debug_dump(&flow);
        assert!(side.contains("u_offset = -1"));
        assert_eq!(&u[u.len() - 3..], &[0, 128, 255]);
    }

    fn arb_flow() -> impl Strategy<Value = (FlowField, BinaryMask)> {
        (
            prop::collection::vec(-3.0f64..3.0, 48),
            prop::collection::vec(-3.0f64..3.0, 48),
            prop::collection::vec(any::<bool>(), 48),
        )
            .prop_map(|(u, v, m)| {
                (
                    FlowField::new(
                        Raster::from_vec(8, 6, u).unwrap(),
                        Raster::from_vec(8, 6, v).unwrap(),
                    )
                    .unwrap(),
                    Raster::from_vec(8, 6, m).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn magnitude_matches_scalar_oracle((flow, _) in arb_flow()) {
            let mag = flow_magnitude(&flow);
            let ori = flow_orientation(&flow);
            for i in 0..48 {
                let (u, v) = (flow.u.data()[i], flow.v.data()[i]);
                prop_assert_eq!(mag.data()[i], (u * u + v * v).sqrt());
                prop_assert!((ori.data()[i] - v.atan2(u)).abs() < 1e-15);
            }
        }

        #[test]
        fn extraction_is_exact_subset((flow, mask) in arb_flow(), tau in 0.0f64..3.0) {
            let mff = extract_flow_vectors(&flow, &mask, tau, 0).unwrap();
            let mut expected = 0;
            for y in 0..6 {
                for x in 0..8 {
                    if mask.get(x, y) && flow.u.get(x, y).hypot(flow.v.get(x, y)) > tau {
                        expected += 1;
                    }
                }
            }
            prop_assert_eq!(mff.len(), expected);
            for f in &mff.vectors {
                prop_assert!(mask.get(f.x, f.y) && f.u.hypot(f.v) > tau);
            }
        }
    }
}
