//! Low-capacity convolutional heads over a correlation map.
//!
//! ```text
//!   C ──conv_e1(1→16)──relu──conv_e2(16→32)──► Φe
//!   Φe ──relu──conv_p(32→1)──► heatmap ──soft-argmax──► point
//!   Φe ──relu──conv_o(32→1)──► spatial mean ──► occlusion logit
//! ```
//!
//! All convolutions are 3x3, stride 1, zero padded, so every map keeps the
//! input's `H x W`. The head has 160 + 4640 + 289 + 289 = 5378 parameters.
//! Gradients are computed by hand; the layout of a gradient is the layout of
//! [`ProbeParams`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{gemm, Trans};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::{expected_coordinates, soft_argmax2d_backward, softmax2d, Grid, Point};

pub const PROBE_PARAM_COUNT: usize = 5378;

/// 3x3 convolution, weights laid out `(out, in, ky, kx)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3<S> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Real> Conv3x3<S> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![S::zero(); out_channels * in_channels * 9],
            bias: vec![S::zero(); out_channels],
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)` with `fan_in = 9 * in_channels`; zero bias.
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (9 * in_channels) as f64).sqrt();
        let mut conv = Self::zeros(in_channels, out_channels);
        for w in conv.weight.iter_mut() {
            *w = S::of(rng.uniform_range(-bound, bound));
        }
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Grid<S>) -> Grid<S> {
        let cols = im2col(x);
        self.forward_cols(&cols, x.height(), x.width())
    }

    fn forward_cols(&self, cols: &[S], h: usize, w: usize) -> Grid<S> {
        let n = h * w;
        let mut out = Grid::zeros(self.out_channels, h, w);
        for (o, &b) in self.bias.iter().enumerate() {
            out.channel_mut(o).fill(b);
        }
        gemm(
            Trans::No,
            Trans::No,
            self.out_channels,
            n,
            self.in_channels * 9,
            S::one(),
            &self.weight,
            cols,
            S::one(),
            out.data_mut(),
        );
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when asked.
    fn backward_cols(
        &self,
        cols: &[S],
        grad_out: &Grid<S>,
        grad: &mut Conv3x3<S>,
        want_input: bool,
    ) -> Option<Grid<S>> {
        let (_, h, w) = grad_out.shape();
        let n = h * w;
        let k = self.in_channels * 9;
        gemm(
            Trans::No,
            Trans::Yes,
            self.out_channels,
            k,
            n,
            S::one(),
            grad_out.data(),
            cols,
            S::one(),
            &mut grad.weight,
        );
        for (o, gb) in grad.bias.iter_mut().enumerate() {
            *gb += grad_out.channel(o).iter().copied().sum::<S>();
        }
        if !want_input {
            return None;
        }
        let mut dcols = vec![S::zero(); k * n];
        gemm(
            Trans::Yes,
            Trans::No,
            k,
            n,
            self.out_channels,
            S::one(),
            &self.weight,
            grad_out.data(),
            S::zero(),
            &mut dcols,
        );
        Some(col2im(&dcols, self.in_channels, h, w))
    }
}

/// Patch matrix of shape `(9 * C) x (H * W)`; out-of-bounds taps are zero.
fn im2col<S: Real>(x: &Grid<S>) -> Vec<S> {
    let (c, h, w) = x.shape();
    let n = h * w;
    let mut cols = vec![S::zero(); c * 9 * n];
    for ci in 0..c {
        let plane = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    let dst = &mut row[i * w..][..w];
                    // dst[j] = src[j + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Real>(cols: &[S], c: usize, h: usize, w: usize) -> Grid<S> {
    let n = h * w;
    let mut out = Grid::zeros(c, h, w);
    for ci in 0..c {
        let plane = out.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..][..w];
                    let dst = &mut plane[si as usize * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// Parameters of the shared encoder and the point / occlusion branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams<S> {
    pub conv_e1: Conv3x3<S>,
    pub conv_e2: Conv3x3<S>,
    pub conv_p: Conv3x3<S>,
    pub conv_o: Conv3x3<S>,
}

impl<S: Real> ProbeParams<S> {
    pub fn zeros() -> Self {
        Self {
            conv_e1: Conv3x3::zeros(1, 16),
            conv_e2: Conv3x3::zeros(16, 32),
            conv_p: Conv3x3::zeros(32, 1),
            conv_o: Conv3x3::zeros(32, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn layers(&self) -> [&Conv3x3<S>; 4] {
        [&self.conv_e1, &self.conv_e2, &self.conv_p, &self.conv_o]
    }

    fn layers_mut(&mut self) -> [&mut Conv3x3<S>; 4] {
        [
            &mut self.conv_e1,
            &mut self.conv_e2,
            &mut self.conv_p,
            &mut self.conv_o,
        ]
    }

    /// Flat view: for each layer in order e1, e2, p, o: weights, then biases.
    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return invalid(format!(
                "probe expects {} parameters, got {}",
                self.param_count(),
                flat.len()
            ));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn from_flat(flat: &[S]) -> Result<Self> {
        let mut p = Self::zeros();
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn cast<T: Real>(&self) -> ProbeParams<T> {
        ProbeParams::from_flat(&self.to_flat().iter().map(|v| T::of(v.as_f64())).collect::<Vec<_>>())
            .expect("same layout")
    }

    /// Named parameter groups and their flat ranges, for reporting.
    pub fn groups(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let names = [
            ("conv_e1.weight", "conv_e1.bias"),
            ("conv_e2.weight", "conv_e2.bias"),
            ("conv_p.weight", "conv_p.bias"),
            ("conv_o.weight", "conv_o.bias"),
        ];
        let mut out = Vec::new();
        let mut off = 0;
        for (l, (wn, bn)) in self.layers().iter().zip(names) {
            out.push((wn, off..off + l.weight.len()));
            off += l.weight.len();
            out.push((bn, off..off + l.bias.len()));
            off += l.bias.len();
        }
        out
    }
}

/// Deterministic initialization from a seed.
pub fn probe_init<S: Real>(seed: u64) -> ProbeParams<S> {
    let mut rng = SeededRng::derived(seed, 0x9be_0001);
    ProbeParams {
        conv_e1: Conv3x3::init(1, 16, &mut rng),
        conv_e2: Conv3x3::init(16, 32, &mut rng),
        conv_p: Conv3x3::init(32, 1, &mut rng),
        conv_o: Conv3x3::init(32, 1, &mut rng),
    }
}

/// Head hyperparameters. Huber delta is in feature-grid units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub temperature: f64,
    pub huber_delta: f64,
    pub w_point: f64,
    pub w_occ: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            huber_delta: 1.0,
            w_point: 1.0,
            w_occ: 1.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.huber_delta > 0.0) {
            return Err(crate::Error::InvalidConfig(
                "probe temperature and huber_delta must be positive".into(),
            ));
        }
        if !(self.w_point >= 0.0 && self.w_occ >= 0.0) {
            return Err(crate::Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutput<S> {
    pub point: Point<S>,
    pub occlusion_logit: S,
    /// Pre-soft-argmax logits.
    pub heatmap: Grid<S>,
}

impl<S: Real> ProbeOutput<S> {
    pub fn occlusion_prob(&self) -> f64 {
        sigmoid(self.occlusion_logit.as_f64())
    }

    /// Ties (probability exactly 0.5) count as visible.
    pub fn visible(&self) -> bool {
        self.occlusion_prob() <= 0.5
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct ForwardCache<S> {
    cols0: Vec<S>,
    a1: Grid<S>,
    cols1: Vec<S>,
    a2: Grid<S>,
    cols2: Vec<S>,
    probs: Grid<S>,
}

fn relu<S: Real>(g: &Grid<S>) -> Grid<S> {
    g.map(|v| v.max(S::zero()))
}

fn forward_cached<S: Real>(
    c: &Grid<S>,
    params: &ProbeParams<S>,
    temperature: f64,
) -> Result<(ProbeOutput<S>, ForwardCache<S>)> {
    if c.channels() != 1 {
        return invalid(format!(
            "probe input must be a single-channel correlation map, got {} channels",
            c.channels()
        ));
    }
    let (h, w) = (c.height(), c.width());
    let cols0 = im2col(c);
    let a1 = params.conv_e1.forward_cols(&cols0, h, w);
    let cols1 = im2col(&relu(&a1));
    let a2 = params.conv_e2.forward_cols(&cols1, h, w);
    let cols2 = im2col(&relu(&a2));
    let heatmap = params.conv_p.forward_cols(&cols2, h, w);
    let occ = params.conv_o.forward_cols(&cols2, h, w);
    let probs = softmax2d(&heatmap, temperature)?;
    let point = expected_coordinates(&probs).clamped(h, w);
    let occ_mean = occ.data().iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
    Ok((
        ProbeOutput {
            point,
            occlusion_logit: S::of(occ_mean),
            heatmap,
        },
        ForwardCache {
            cols0,
            a1,
            cols1,
            a2,
            cols2,
            probs,
        },
    ))
}

/// Point and occlusion prediction for one correlation map (temperature 1).
pub fn probe_forward<S: Real>(c: &Grid<S>, params: &ProbeParams<S>) -> Result<ProbeOutput<S>> {
    probe_forward_with(c, params, &ProbeConfig::default())
}

pub fn probe_forward_with<S: Real>(
    c: &Grid<S>,
    params: &ProbeParams<S>,
    config: &ProbeConfig,
) -> Result<ProbeOutput<S>> {
    forward_cached(c, params, config.temperature).map(|(out, _)| out)
}

/// Huber loss applied per coordinate and summed.
pub fn huber_loss<S: Real>(pred: Point<S>, gt: Point<S>, delta: S) -> S {
    huber(pred.x - gt.x, delta) + huber(pred.y - gt.y, delta)
}

fn huber<S: Real>(e: S, delta: S) -> S {
    let a = e.abs();
    if a <= delta {
        e * e * S::of(0.5)
    } else {
        delta * (a - delta * S::of(0.5))
    }
}

fn huber_grad<S: Real>(e: S, delta: S) -> S {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

/// Binary cross-entropy on a logit, `occluded = true` is the positive class.
pub fn bce_loss<S: Real>(logit: S, occluded: bool) -> S {
    let z = logit.as_f64();
    let y = if occluded { 1.0 } else { 0.0 };
    S::of(z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
}

/// One supervised correlation map. `gt` is in feature-grid units.
#[derive(Clone, Copy, Debug)]
pub struct ProbeSample<'a, S> {
    pub map: &'a Grid<S>,
    pub gt: Point<S>,
    pub occluded: bool,
}

pub(crate) struct ItemGrad<S> {
    pub loss: f64,
    pub input: Option<Grid<S>>,
}

/// Loss of one item scaled by `(point_scale, occ_scale)`, accumulating
/// parameter gradients into `grad`.
pub(crate) fn item_loss_and_grad<S: Real>(
    sample: &ProbeSample<'_, S>,
    params: &ProbeParams<S>,
    config: &ProbeConfig,
    point_scale: f64,
    occ_scale: f64,
    grad: &mut ProbeParams<S>,
    want_input: bool,
) -> Result<ItemGrad<S>> {
    let (out, cache) = forward_cached(sample.map, params, config.temperature)?;
    let (h, w) = (sample.map.height(), sample.map.width());
    let delta = S::of(config.huber_delta);
    let mut loss = 0.0;

    let mut d_point = Point::new(S::zero(), S::zero());
    if !sample.occluded && point_scale != 0.0 {
        loss += point_scale * huber_loss(out.point, sample.gt, delta).as_f64();
        let s = S::of(point_scale);
        d_point = Point::new(
            s * huber_grad(out.point.x - sample.gt.x, delta),
            s * huber_grad(out.point.y - sample.gt.y, delta),
        );
    }
    loss += occ_scale * bce_loss(out.occlusion_logit, sample.occluded).as_f64();
    let y = if sample.occluded { 1.0 } else { 0.0 };
    let d_logit = occ_scale * (sigmoid(out.occlusion_logit.as_f64()) - y);

    let d_heat = soft_argmax2d_backward(&cache.probs, out.point, d_point, config.temperature);
    let d_occ = Grid::filled(1, h, w, S::of(d_logit / (h * w) as f64));

    let mut dh2 = params
        .conv_p
        .backward_cols(&cache.cols2, &d_heat, &mut grad.conv_p, true)
        .expect("input gradient requested");
    let dh2_o = params
        .conv_o
        .backward_cols(&cache.cols2, &d_occ, &mut grad.conv_o, true)
        .expect("input gradient requested");
    for ((d, &o), &a) in dh2.data_mut().iter_mut().zip(dh2_o.data()).zip(cache.a2.data()) {
        *d = if a > S::zero() { *d + o } else { S::zero() };
    }
    let mut dh1 = params
        .conv_e2
        .backward_cols(&cache.cols1, &dh2, &mut grad.conv_e2, true)
        .expect("input gradient requested");
    for (d, &a) in dh1.data_mut().iter_mut().zip(cache.a1.data()) {
        if a <= S::zero() {
            *d = S::zero();
        }
    }
    let input = params
        .conv_e1
        .backward_cols(&cache.cols0, &dh1, &mut grad.conv_e1, want_input);
    Ok(ItemGrad { loss, input })
}

/// `w_point * mean over visible items of Huber + w_occ * mean over items of BCE`
/// and its gradient. Items are reduced in order, so results are bit-reproducible.
pub fn probe_loss_and_grad<S: Real>(
    batch: &[ProbeSample<'_, S>],
    params: &ProbeParams<S>,
    config: &ProbeConfig,
) -> Result<(f64, ProbeParams<S>)> {
    if batch.is_empty() {
        return invalid("probe loss needs a nonempty batch");
    }
    let (point_scale, occ_scale) = loss_scales(batch.iter().map(|s| s.occluded), config);
    let mut grad = ProbeParams::zeros();
    let mut loss = 0.0;
    for s in batch {
        loss += item_loss_and_grad(s, params, config, point_scale, occ_scale, &mut grad, false)?.loss;
    }
    Ok((loss, grad))
}

/// Per-item weights realizing the masked means.
pub(crate) fn loss_scales(occluded: impl Iterator<Item = bool>, config: &ProbeConfig) -> (f64, f64) {
    let (mut n, mut visible) = (0usize, 0usize);
    for o in occluded {
        n += 1;
        if !o {
            visible += 1;
        }
    }
    let point_scale = if visible > 0 {
        config.w_point / visible as f64
    } else {
        0.0
    };
    (point_scale, config.w_occ / n.max(1) as f64)
}

/// Loss only, no gradient.
pub fn probe_loss<S: Real>(
    batch: &[ProbeSample<'_, S>],
    params: &ProbeParams<S>,
    config: &ProbeConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return invalid("probe loss needs a nonempty batch");
    }
    let (point_scale, occ_scale) = loss_scales(batch.iter().map(|s| s.occluded), config);
    let delta = S::of(config.huber_delta);
    let mut loss = 0.0;
    for s in batch {
        let out = probe_forward_with(s.map, params, config)?;
        if !s.occluded {
            loss += point_scale * huber_loss(out.point, s.gt, delta).as_f64();
        }
        loss += occ_scale * bce_loss(out.occlusion_logit, s.occluded).as_f64();
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Nested-loop zero-padded 3x3 convolution, independent of im2col/gemm.
    fn direct_conv(conv: &Conv3x3<f64>, x: &Grid<f64>) -> Grid<f64> {
        let (c, h, w) = x.shape();
        Grid::from_fn(conv.out_channels, h, w, |o, i, j| {
            let mut s = conv.bias[o];
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                            s += conv.weight[((o * c + ci) * 3 + ky) * 3 + kx]
                                * x.get(ci, si as usize, sj as usize);
                        }
                    }
                }
            }
            s
        })
    }

    fn reference_forward(c: &Grid<f64>, p: &ProbeParams<f64>) -> (Grid<f64>, f64) {
        let r = |g: Grid<f64>| g.map(|v| v.max(0.0));
        let e = direct_conv(&p.conv_e2, &r(direct_conv(&p.conv_e1, c)));
        let heat = direct_conv(&p.conv_p, &r(e.clone()));
        let occ = direct_conv(&p.conv_o, &r(e));
        let mean = occ.data().iter().sum::<f64>() / occ.data().len() as f64;
        (heat, mean)
    }

    fn random_map(rng: &mut SeededRng, h: usize, w: usize) -> Grid<f64> {
        Grid::from_fn(1, h, w, |_, _, _| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn init_is_deterministic_and_counts_5378() {
        let a = probe_init::<f64>(11);
        assert_eq!(a, probe_init::<f64>(11));
        assert_ne!(a.conv_e2.weight, probe_init::<f64>(12).conv_e2.weight);
        assert_eq!(a.param_count(), PROBE_PARAM_COUNT);
        assert_eq!(
            [a.conv_e1.param_count(), a.conv_e2.param_count(), a.conv_p.param_count(), a.conv_o.param_count()],
            [160, 4640, 289, 289]
        );
        assert!(a.conv_e1.bias.iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 144.0).sqrt();
        assert!(a.conv_e2.weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_params_predict_centroid_and_even_odds() {
        let mut rng = SeededRng::new(1);
        let c = random_map(&mut rng, 5, 8);
        let out = probe_forward(&c, &ProbeParams::<f64>::zeros()).unwrap();
        assert!(out.heatmap.data().iter().all(|&v| v == 0.0));
        assert!((out.point.x - 3.5).abs() < 1e-12 && (out.point.y - 2.0).abs() < 1e-12);
        assert_eq!(out.occlusion_logit, 0.0);
        assert_eq!(out.occlusion_prob(), 0.5);
        assert!(out.visible());
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = SeededRng::new(2);
        for seed in 0..5 {
            let p = probe_init::<f64>(seed);
            let c = random_map(&mut rng, 7, 9);
            let out = probe_forward(&c, &p).unwrap();
            let (heat, occ) = reference_forward(&c, &p);
            for (a, b) in out.heatmap.data().iter().zip(heat.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((out.occlusion_logit - occ).abs() < 1e-12);
        }
        assert!(probe_forward(&Grid::<f64>::zeros(2, 4, 4), &probe_init(0)).is_err());
    }

    #[test]
    fn heatmap_is_translation_equivariant_in_the_interior() {
        let mut rng = SeededRng::new(3);
        let p = probe_init::<f64>(4);
        let (h, w) = (12, 12);
        let base = random_map(&mut rng, h, w + 1);
        let c = Grid::from_fn(1, h, w, |_, i, j| base.get(0, i, j + 1));
        let shifted = Grid::from_fn(1, h, w, |_, i, j| base.get(0, i, j));
        let a = probe_forward(&c, &p).unwrap().heatmap;
        let b = probe_forward(&shifted, &p).unwrap().heatmap;
        // three stacked 3x3 layers see 3 cells away from the border
        for i in 3..h - 3 {
            for j in 3..w - 4 {
                assert!((a.get(0, i, j) - b.get(0, i, j + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let z = Point::new(1.0, 2.0);
        assert_eq!(huber_loss(z, z, 1.0), 0.0);
        assert_eq!(huber_loss(Point::new(1.5, 2.0), z, 1.0), 0.125);
        assert_eq!(huber_loss(Point::new(3.0, 2.0), z, 1.0), 1.5);
        assert!((bce_loss(0.0, true) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(0.0, false) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(50.0, true) < 1e-20);
        assert!(bce_loss(-50.0, false) < 1e-20);
        assert!((bce_loss(50.0f64, false) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn optimum_has_zero_gradient() {
        let mut rng = SeededRng::new(5);
        let c = random_map(&mut rng, 5, 5);
        let cfg = ProbeConfig { w_occ: 0.0, ..Default::default() };
        let batch = [ProbeSample { map: &c, gt: Point::new(2.0, 2.0), occluded: false }];
        let (loss, g) = probe_loss_and_grad(&batch, &ProbeParams::zeros(), &cfg).unwrap();
        assert!(loss < 1e-20);
        let norm: f64 = g.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-12, "gradient norm {norm}");
    }

    #[test]
    fn all_occluded_gives_zero_point_branch_gradient() {
        let mut rng = SeededRng::new(6);
        let maps: Vec<_> = (0..3).map(|_| random_map(&mut rng, 6, 6)).collect();
        let batch: Vec<_> = maps
            .iter()
            .map(|m| ProbeSample { map: m, gt: Point::new(1.0, 1.0), occluded: true })
            .collect();
        let (_, g) = probe_loss_and_grad(&batch, &probe_init(1), &ProbeConfig::default()).unwrap();
        assert!(g.conv_p.weight.iter().chain(&g.conv_p.bias).all(|&v| v == 0.0));
        assert!(g.conv_o.weight.iter().any(|&v| v != 0.0));
        assert!(probe_loss_and_grad::<f64>(&[], &probe_init(1), &ProbeConfig::default()).is_err());
    }

    #[test]
    fn loss_and_grad_agree_with_loss_only_path() {
        let mut rng = SeededRng::new(7);
        let maps: Vec<_> = (0..4).map(|_| random_map(&mut rng, 6, 7)).collect();
        let batch: Vec<_> = maps
            .iter()
            .enumerate()
            .map(|(k, m)| ProbeSample { map: m, gt: Point::new(2.5, 1.0 + k as f64), occluded: k == 2 })
            .collect();
        let p = probe_init(3);
        let cfg = ProbeConfig::default();
        let (l, _) = probe_loss_and_grad(&batch, &p, &cfg).unwrap();
        assert!((l - probe_loss(&batch, &p, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn flat_round_trip_and_groups() {
        let p = probe_init::<f64>(9);
        let flat = p.to_flat();
        assert_eq!(ProbeParams::from_flat(&flat).unwrap(), p);
        assert!(ProbeParams::<f64>::from_flat(&flat[1..]).is_err());
        let groups = p.groups();
        assert_eq!(groups.len(), 8);
        assert_eq!(groups.last().unwrap().1.end, PROBE_PARAM_COUNT);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = SeededRng::new(8);
        let maps: Vec<_> = (0..3).map(|_| random_map(&mut rng, 5, 6)).collect();
        let batch: Vec<_> = maps
            .iter()
            .enumerate()
            .map(|(k, m)| ProbeSample {
                map: m,
                gt: Point::new(rng.uniform_range(0.0, 5.0), rng.uniform_range(0.0, 4.0)),
                occluded: k == 1,
            })
            .collect();
        let mut p = probe_init::<f64>(21);
        for b in p.conv_e1.bias.iter_mut().chain(p.conv_e2.bias.iter_mut()) {
            *b = rng.uniform_range(-0.1, 0.1);
        }
        let cfg = ProbeConfig::default();
        let (_, g) = probe_loss_and_grad(&batch, &p, &cfg).unwrap();
        let flat = p.to_flat();
        let g = g.to_flat();
        let h = 1e-5;
        for k in (0..flat.len()).step_by(37).chain([5376, 5377]) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let lp = probe_loss(&batch, &ProbeParams::from_flat(&plus).unwrap(), &cfg).unwrap();
            let lm = probe_loss(&batch, &ProbeParams::from_flat(&minus).unwrap(), &cfg).unwrap();
            let num = (lp - lm) / (2.0 * h);
            assert!((num - g[k]).abs() <= 1e-6 * (1.0 + num.abs()), "param {k}: {num} vs {}", g[k]);
        }
    }
}
