//! Foreground extraction: an adaptive per-pixel Gaussian mixture background
//! model (`f_g`), a flow-magnitude mask (`f_hs`), and their fused, cleaned
//! logical product (`f_out`).

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::motion::{flow_magnitude, FlowField};
use crate::raster::{gaussian_smooth, median_filter, morph_close, morph_open, BinaryMask, Frame, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmParams {
    /// Maximum components per pixel.
    pub components: usize,
    pub learning_rate: f64,
    /// Cumulative weight that the background components must exceed.
    pub background_ratio: f64,
    /// A sample matches a component within this many standard deviations.
    pub match_sigmas: f64,
    pub variance_floor: f64,
    /// Variance given to freshly created components.
    pub initial_variance: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            components: 3,
            learning_rate: 0.02,
            background_ratio: 0.7,
            match_sigmas: 2.5,
            variance_floor: (4.0f64 / 255.0).powi(2),
            initial_variance: (20.0f64 / 255.0).powi(2),
        }
    }
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        if self.components < 1 {
            return Err(Error::param("gmm components must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::param("learning_rate must lie in (0, 1)"));
        }
        if !(self.background_ratio > 0.0 && self.background_ratio <= 1.0) {
            return Err(Error::param("background_ratio must lie in (0, 1]"));
        }
        if !(self.match_sigmas > 0.0) {
            return Err(Error::param("match_sigmas must be > 0"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::param("variance_floor must be > 0"));
        }
        if !(self.initial_variance >= self.variance_floor) {
            return Err(Error::param("initial_variance must be >= variance_floor"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

impl Component {
    fn rank(&self) -> f64 {
        self.weight / self.variance.sqrt()
    }
}

/// Components kept sorted by `weight / stddev`, descending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelMixture {
    pub components: Vec<Component>,
}

impl PixelMixture {
    /// Fold one sample into the mixture; returns `true` if it is foreground.
    fn update(&mut self, x: f64, p: &GmmParams) -> bool {
        let comps = &mut self.components;
        if comps.is_empty() {
            comps.push(Component {
                weight: 1.0,
                mean: x,
                variance: p.initial_variance,
            });
            return false;
        }
        let alpha = p.learning_rate;
        let matched = comps
            .iter()
            .position(|c| (x - c.mean).abs() <= p.match_sigmas * c.variance.sqrt());
        for (k, c) in comps.iter_mut().enumerate() {
            let hit = if Some(k) == matched { 1.0 } else { 0.0 };
            c.weight = (1.0 - alpha) * c.weight + alpha * hit;
        }
        let fresh = Component {
            weight: alpha,
            mean: x,
            variance: p.initial_variance,
        };
        let hit = match matched {
            Some(k) => {
                let c = &mut comps[k];
                let rho = (alpha / c.weight).min(1.0);
                c.mean += rho * (x - c.mean);
                let d = x - c.mean;
                c.variance = ((1.0 - rho) * c.variance + rho * d * d).max(p.variance_floor);
                Some(k)
            }
            None if comps.len() < p.components => {
                comps.push(fresh);
                None
            }
            None => {
                let weakest = comps
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.weight.total_cmp(&b.1.weight))
                    .map(|(k, _)| k)
                    .expect("nonempty");
                comps[weakest] = fresh;
                None
            }
        };
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        comps.iter_mut().for_each(|c| c.weight /= total);
        let mut order: Vec<usize> = (0..comps.len()).collect();
        order.sort_by(|&a, &b| comps[b].rank().total_cmp(&comps[a].rank()));
        *comps = order.iter().map(|&k| comps[k]).collect();

        let Some(hit) = hit else {
            return true;
        };
        let position = order.iter().position(|&k| k == hit).expect("matched component survives");
        let mut cumulative = 0.0;
        let mut background = comps.len();
        for (k, c) in comps.iter().enumerate() {
            cumulative += c.weight;
            if cumulative > p.background_ratio {
                background = k + 1;
                break;
            }
        }
        position >= background
    }
}

/// Per-pixel mixtures for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    width: usize,
    height: usize,
    params: GmmParams,
    mixtures: Vec<PixelMixture>,
    frames_seen: u64,
}

const CHECKPOINT_MAGIC: &[u8; 12] = b"CROWDKIT-GMM";
const CHECKPOINT_VERSION: u32 = 1;

impl BackgroundModel {
    pub fn new(width: usize, height: usize, params: GmmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            width,
            height,
            params,
            mixtures: vec![PixelMixture::default(); width * height],
            frames_seen: 0,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn params(&self) -> &GmmParams {
        &self.params
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn mixture(&self, x: usize, y: usize) -> &PixelMixture {
        &self.mixtures[y * self.width + x]
    }

    /// Learn from `frame` and return its foreground mask `f_g`.
    pub fn update(&mut self, frame: &Frame) -> Result<BinaryMask> {
        check_dims(self.dims(), frame.dims())?;
        let p = self.params;
        let bits = self
            .mixtures
            .iter_mut()
            .zip(frame.samples())
            .map(|(m, &x)| m.update(x, &p))
            .collect();
        self.frames_seen += 1;
        Raster::from_vec(self.width, self.height, bits)
    }

    /// Flat little-endian checkpoint.
    ///
    /// ```text
    /// 0..12   magic "CROWDKIT-GMM"
    /// 12..16  version (u32)
    /// 16..20  width (u32)     20..24 height (u32)
    /// 24..28  K (u32)         28..36 frames_seen (u64)
    /// 36..    per-pixel: count (u32), then K triples (weight, mean, variance) as f64,
    ///         unused slots zero-filled
    /// ```
    /// Only the mixtures and dimensions are stored; the caller supplies the
    /// remaining parameters on restore.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.params.components;
        let mut out = Vec::with_capacity(36 + self.mixtures.len() * (4 + 24 * k));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&self.frames_seen.to_le_bytes());
        for m in &self.mixtures {
            out.extend_from_slice(&(m.components.len() as u32).to_le_bytes());
            for slot in 0..k {
                let c = m.components.get(slot).copied().unwrap_or(Component {
                    weight: 0.0,
                    mean: 0.0,
                    variance: 0.0,
                });
                for v in [c.weight, c.mean, c.variance] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], params: GmmParams) -> Result<Self> {
        let err = |offset: usize, msg: &str| Error::Parse {
            offset,
            msg: msg.to_string(),
        };
        let u32_at = |o: usize| -> Result<u32> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| err(o, "truncated checkpoint"))
        };
        let f64_at = |o: usize| -> Result<f64> {
            bytes
                .get(o..o + 8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| err(o, "truncated checkpoint"))
        };
        if bytes.get(..12) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(err(0, "bad checkpoint magic"));
        }
        if u32_at(12)? != CHECKPOINT_VERSION {
            return Err(err(12, "unsupported checkpoint version"));
        }
        let width = u32_at(16)? as usize;
        let height = u32_at(20)? as usize;
        let k = u32_at(24)? as usize;
        if k != params.components {
            return Err(err(24, "component count differs from parameters"));
        }
        let frames_seen = bytes
            .get(28..36)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| err(28, "truncated checkpoint"))?;
        let mut model = Self::new(width, height, params)?;
        model.frames_seen = frames_seen;
        let stride = 4 + 24 * k;
        for (i, m) in model.mixtures.iter_mut().enumerate() {
            let base = 36 + i * stride;
            let count = u32_at(base)? as usize;
            if count > k {
                return Err(err(base, "component count exceeds K"));
            }
            for slot in 0..count {
                let o = base + 4 + slot * 24;
                m.components.push(Component {
                    weight: f64_at(o)?,
                    mean: f64_at(o + 8)?,
                    variance: f64_at(o + 16)?,
                });
            }
        }
        Ok(model)
    }
}

/// `gmm_update` as a value-returning step.
pub fn gmm_update(mut model: BackgroundModel, frame: &Frame) -> Result<(BackgroundModel, BinaryMask)> {
    let f_g = model.update(frame)?;
    Ok((model, f_g))
}

/// Flow-magnitude foreground: magnitude, Gaussian blur, median filter, then
/// threshold strictly above `tau_mag`.
pub fn flow_foreground_mask(flow: &FlowField, tau_mag: f64, sigma: f64, median_radius: usize) -> Result<BinaryMask> {
    if !(tau_mag >= 0.0) {
        return Err(Error::param("tau_mag must be >= 0"));
    }
    let smoothed = median_filter(&gaussian_smooth(&flow_magnitude(flow), sigma)?, median_radius);
    Ok(smoothed.map(|m| m > tau_mag))
}

/// `f_out = close(open(f_g AND f_hs))`.
pub fn fuse(f_g: &BinaryMask, f_hs: &BinaryMask, morph_radius: usize) -> Result<BinaryMask> {
    let product = f_g.and(f_hs)?;
    Ok(morph_close(&morph_open(&product, morph_radius), morph_radius))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionMasks {
    pub t: u64,
    pub f_g: BinaryMask,
    pub f_hs: BinaryMask,
    pub f_out: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    pub tau_mag: f64,
    pub smooth_sigma: f64,
    pub median_radius: usize,
    pub morph_radius: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            tau_mag: 0.25,
            smooth_sigma: 1.0,
            median_radius: 1,
            morph_radius: 1,
        }
    }
}

/// Both masks for one frame, given its GMM mask and the flow into it.
pub fn fusion_masks(t: u64, f_g: BinaryMask, flow: &FlowField, p: &MaskParams) -> Result<FusionMasks> {
    let f_hs = flow_foreground_mask(flow, p.tau_mag, p.smooth_sigma, p.median_radius)?;
    let f_out = fuse(&f_g, &f_hs, p.morph_radius)?;
    Ok(FusionMasks { t, f_g, f_hs, f_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Frame {
        Frame::from_raster(0, Raster::from_fn(w, h, f)).unwrap()
    }

    #[test]
    fn static_scene_is_background() {
        let f = frame(6, 5, |x, y| 0.1 + 0.05 * ((x + y) % 3) as f64);
        let mut model = BackgroundModel::new(6, 5, GmmParams::default()).unwrap();
        for _ in 0..50 {
            model.update(&f).unwrap();
        }
        assert_eq!(model.update(&f).unwrap().count(), 0);
    }

    /// Independent trace of one pixel's mixture: a dark pixel seen 50 times
    /// ends with a single component at the variance floor, so a bright
    /// sample lies far outside 2.5 sigma and is foreground.
    #[test]
    fn bright_patch_is_exact_foreground() {
        let p = GmmParams::default();
        let mut var = p.initial_variance;
        let mut weight: f64 = 1.0;
        for _ in 1..50 {
            weight = (1.0 - p.learning_rate) * weight + p.learning_rate;
            let rho = (p.learning_rate / weight).min(1.0);
            var = ((1.0 - rho) * var).max(p.variance_floor);
        }
        assert!((0.9 - 0.05) > p.match_sigmas * var.sqrt());

        let dark = frame(12, 10, |_, _| 0.05);
        let patch = frame(12, 10, |x, y| if (4..8).contains(&x) && (3..7).contains(&y) { 0.9 } else { 0.05 });
        let mut model = BackgroundModel::new(12, 10, p).unwrap();
        for _ in 0..50 {
            model.update(&dark).unwrap();
        }
        let fg = model.update(&patch).unwrap();
        let expected = Raster::from_fn(12, 10, |x, y| (4..8).contains(&x) && (3..7).contains(&y));
        assert_eq!(fg, expected);
    }

    #[test]
    fn weights_stay_on_simplex() {
        let mut model = BackgroundModel::new(4, 4, GmmParams::default()).unwrap();
        for t in 0..40 {
            let f = frame(4, 4, |x, y| ((x * 7 + y * 3 + t * 5) % 11) as f64 / 10.0);
            model.update(&f).unwrap();
            for m in &model.mixtures {
                let s: f64 = m.components.iter().map(|c| c.weight).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(m.components.len() <= 3);
                assert!(m.components.iter().all(|c| c.weight >= 0.0 && c.variance >= model.params.variance_floor));
                assert!(m.components.windows(2).all(|w| w[0].rank() >= w[1].rank()));
            }
        }
    }

    #[test]
    fn rejects_bad_params_and_dims() {
        let bad = GmmParams {
            learning_rate: 1.0,
            ..GmmParams::default()
        };
        assert!(BackgroundModel::new(2, 2, bad).is_err());
        let mut m = BackgroundModel::new(2, 2, GmmParams::default()).unwrap();
        assert!(matches!(m.update(&frame(3, 2, |_, _| 0.0)), Err(Error::Dimensions { .. })));
    }

    #[test]
    fn checkpoint_roundtrip_and_header() {
        let mut model = BackgroundModel::new(3, 2, GmmParams::default()).unwrap();
        for t in 0..5 {
            model.update(&frame(3, 2, |x, _| ((x + t) % 2) as f64 * 0.8)).unwrap();
        }
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..12], b"CROWDKIT-GMM");
        assert_eq!(bytes.len(), 36 + 6 * (4 + 24 * 3));
        let back = BackgroundModel::from_bytes(&bytes, GmmParams::default()).unwrap();
        assert_eq!(back, model);
        assert!(BackgroundModel::from_bytes(&bytes[..40], GmmParams::default()).is_err());
    }

    #[test]
    fn flow_mask_cases() {
        let zero = FlowField::zeros(8, 8);
        assert_eq!(flow_foreground_mask(&zero, 0.25, 1.0, 1).unwrap().count(), 0);
        let uniform = FlowField::from_fn(8, 8, |_, _| (0.3, 0.4));
        assert_eq!(flow_foreground_mask(&uniform, 0.25, 1.0, 1).unwrap().count(), 64);
        let mut speck = FlowField::zeros(9, 9);
        speck.u.set(4, 4, 50.0);
        assert_eq!(flow_foreground_mask(&speck, 0.25, 0.0, 1).unwrap().count(), 0);
    }

    #[test]
    fn fuse_cases() {
        let mut fg = BinaryMask::empty(10, 10);
        for y in 2..7 {
            for x in 2..7 {
                fg.set(x, y, true);
            }
        }
        let all = BinaryMask::filled(10, 10, true);
        assert_eq!(fuse(&fg, &all, 1).unwrap(), morph_close(&morph_open(&fg, 1), 1));
        let other = fg.map(|b| !b);
        assert_eq!(fuse(&fg, &other, 1).unwrap().count(), 0);
        assert!(fuse(&fg, &BinaryMask::empty(9, 10), 1).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), 120).prop_map(|d| Raster::from_vec(12, 10, d).unwrap())
    }

    proptest! {
        #[test]
        fn radius_zero_fusion_is_bitwise_and(a in arb_mask(), b in arb_mask()) {
            let out = fuse(&a, &b, 0).unwrap();
            for i in 0..120 {
                prop_assert_eq!(out.data()[i], a.data()[i] && b.data()[i]);
            }
            prop_assert!(out.is_subset_of(&a) && out.is_subset_of(&b));
        }

        #[test]
        fn fused_within_dilated_product(a in arb_mask(), b in arb_mask(), r in 1usize..3) {
            let out = fuse(&a, &b, r).unwrap();
            let bound = crate::raster::dilate(&a.and(&b).unwrap(), r);
            prop_assert!(out.is_subset_of(&bound));
        }
    }
}
