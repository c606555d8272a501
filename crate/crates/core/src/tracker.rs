//! Query sampling, cosine correlation maps and zero-shot (argmax) tracking.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::{argmax2d, bilinear_sample, bilinear_taps, resize_bilinear, Grid, Point};

/// Dense per-frame feature maps of one video, `T x D x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVideo<S> {
    frames: Vec<Grid<S>>,
    /// Input pixels per feature cell.
    pub stride: u32,
    /// `(height, width)` of the frames the features were computed from, in pixels.
    pub source_resolution: (u32, u32),
}

impl<S: Real> FeatureVideo<S> {
    pub fn new(frames: Vec<Grid<S>>, stride: u32, source_resolution: (u32, u32)) -> Result<Self> {
        let Some(first) = frames.first() else {
            return invalid("feature video needs at least one frame");
        };
        let shape = first.shape();
        if let Some(t) = frames.iter().position(|f| f.shape() != shape) {
            return invalid(format!(
                "frame {t} has shape {:?}, expected {shape:?}",
                frames[t].shape()
            ));
        }
        if stride == 0 {
            return invalid("stride must be at least 1");
        }
        if source_resolution.0 == 0 || source_resolution.1 == 0 {
            return invalid("source resolution must be positive");
        }
        Ok(Self {
            frames,
            stride,
            source_resolution,
        })
    }

    pub fn frames(&self) -> &[Grid<S>] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Grid<S>> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// `(D, H, W)`
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }

    pub fn cast<T: Real>(&self) -> FeatureVideo<T> {
        FeatureVideo {
            frames: self.frames.iter().map(Grid::cast).collect(),
            stride: self.stride,
            source_resolution: self.source_resolution,
        }
    }

    /// Resample every frame to a `resolution x resolution` grid. The source
    /// resolution is kept; the stride is recomputed (rounded) for bookkeeping.
    pub fn resized(&self, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return invalid("feature resolution must be positive");
        }
        let frames = self
            .frames
            .iter()
            .map(|f| resize_bilinear(f, resolution, resolution))
            .collect::<Result<Vec<_>>>()?;
        let stride = ((self.source_resolution.1 as f64 / resolution as f64).round() as u32).max(1);
        Self::new(frames, stride, self.source_resolution)
    }

    pub fn geometry(&self) -> GridGeometry {
        let (_, h, w) = self.frame_shape();
        GridGeometry {
            grid_h: h,
            grid_w: w,
            source_h: self.source_resolution.0 as usize,
            source_w: self.source_resolution.1 as usize,
        }
    }
}

/// Mapping between feature-grid units and source pixels. Pixel coordinates
/// are continuous with the image spanning `[0, source_w] x [0, source_h]`;
/// cell `j` covers `[j, j + 1) * source_w / grid_w`, its center at `j + 0.5`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub source_h: usize,
    pub source_w: usize,
}

impl GridGeometry {
    pub fn cell_size(&self) -> (f64, f64) {
        (
            self.source_w as f64 / self.grid_w as f64,
            self.source_h as f64 / self.grid_h as f64,
        )
    }

    pub fn to_pixels(&self, p: Point<f64>) -> Point<f64> {
        let (sx, sy) = self.cell_size();
        Point::new((p.x + 0.5) * sx, (p.y + 0.5) * sy)
    }

    pub fn to_grid(&self, px: Point<f64>) -> Point<f64> {
        let (sx, sy) = self.cell_size();
        Point::new(px.x / sx - 0.5, px.y / sy - 0.5)
    }
}

/// A point to track, prompted at frame `t_q` and location `point` (grid units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub t_q: usize,
    pub point: Point<f64>,
}

impl Query {
    pub fn new(t_q: usize, point: Point<f64>) -> Self {
        Self { t_q, point }
    }

    pub fn validate<S: Real>(&self, video: &FeatureVideo<S>) -> Result<()> {
        if self.t_q >= video.num_frames() {
            return invalid(format!(
                "query frame {} out of range for {} frames",
                self.t_q,
                video.num_frames()
            ));
        }
        if !self.point.is_finite() {
            return invalid("query location is not finite");
        }
        Ok(())
    }
}

/// Per-frame predicted positions (grid units) and visibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Point<f64>>,
    pub visible: Vec<bool>,
    pub occlusion_prob: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `q = F_{t_q}(p_q)` by bilinear interpolation.
pub fn extract_query_feature<S: Real>(video: &FeatureVideo<S>, query: &Query) -> Result<Vec<S>> {
    query.validate(video)?;
    bilinear_sample(&video.frames[query.t_q], query.point.cast())
}

fn norm_sq<S: Real>(v: impl Iterator<Item = S>) -> f64 {
    v.map(|x| {
        let x = x.as_f64();
        x * x
    })
    .sum()
}

/// Cosine similarity between `q` and every cell of `frame`. Cells with zero
/// feature norm get similarity 0.
pub fn correlation_map<S: Real>(frame: &Grid<S>, q: &[S]) -> Result<Grid<S>> {
    let (d, h, w) = frame.shape();
    if q.len() != d {
        return invalid(format!(
            "query feature has {} channels, frame has {d}",
            q.len()
        ));
    }
    let q_sq = norm_sq(q.iter().copied());
    if !(q_sq > 0.0) {
        return invalid("query feature has zero norm");
    }
    let n = h * w;
    let mut dot = vec![0.0f64; n];
    let mut f_sq = vec![0.0f64; n];
    for (c, &qc) in q.iter().enumerate() {
        let qc = qc.as_f64();
        for (k, &v) in frame.channel(c).iter().enumerate() {
            let v = v.as_f64();
            dot[k] += qc * v;
            f_sq[k] += v * v;
        }
    }
    let data = dot
        .iter()
        .zip(&f_sq)
        .map(|(&num, &fs)| {
            if fs > 0.0 {
                S::of((num / (q_sq * fs).sqrt()).clamp(-1.0, 1.0))
            } else {
                S::zero()
            }
        })
        .collect();
    Grid::new(1, h, w, data)
}

/// Correlation map of every frame against the query feature.
pub fn correlation_volume<S: Real>(video: &FeatureVideo<S>, query: &Query) -> Result<Vec<Grid<S>>> {
    let q = extract_query_feature(video, query)?;
    video
        .frames
        .iter()
        .map(|f| correlation_map(f, &q))
        .collect()
}

/// Zero-shot tracking: the argmax cell of every correlation map. Every frame is
/// predicted visible; no occlusion probability is produced.
pub fn zero_shot_track<S: Real>(video: &FeatureVideo<S>, query: &Query) -> Result<Trajectory> {
    let volume = correlation_volume(video, query)?;
    let points = volume
        .iter()
        .map(|c| argmax2d(c).map(|p| p.cast()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        visible: vec![true; points.len()],
        points,
        occlusion_prob: None,
    })
}

/// Gradients of a loss w.r.t. the frame features and the query feature given
/// `dL/dC` for `C = correlation_map(frame, q)`.
///
/// Zero-norm cells carry no gradient, matching their constant similarity.
pub fn correlation_map_backward(
    frame: &Grid<f64>,
    q: &[f64],
    grad_c: &Grid<f64>,
) -> Result<(Grid<f64>, Vec<f64>)> {
    let (d, h, w) = frame.shape();
    if q.len() != d || grad_c.shape() != (1, h, w) {
        return invalid("correlation backward: shape mismatch");
    }
    let q_norm = norm_sq(q.iter().copied()).sqrt();
    if !(q_norm > 0.0) {
        return invalid("query feature has zero norm");
    }
    let n = h * w;
    let mut dot = vec![0.0; n];
    let mut f_sq = vec![0.0; n];
    for (c, &qc) in q.iter().enumerate() {
        for (k, &v) in frame.channel(c).iter().enumerate() {
            dot[k] += qc * v;
            f_sq[k] += v * v;
        }
    }
    // dC/df = q/(|q||f|) - C f/|f|^2 ; dC/dq = f/(|q||f|) - C q/|q|^2
    let mut a = vec![0.0; n]; // g / (|q||f|)
    let mut b = vec![0.0; n]; // g C / |f|^2
    let mut gq_self = 0.0; // sum_k g C / |q|^2
    for k in 0..n {
        if f_sq[k] > 0.0 {
            let f_norm = f_sq[k].sqrt();
            let cval = dot[k] / (q_norm * f_norm);
            let g = grad_c.data()[k];
            a[k] = g / (q_norm * f_norm);
            b[k] = g * cval / f_sq[k];
            gq_self += g * cval / (q_norm * q_norm);
        }
    }
    let mut grad_f = Grid::zeros(d, h, w);
    let mut grad_q = vec![0.0; d];
    for c in 0..d {
        let qc = q[c];
        let plane = frame.channel(c);
        let out = grad_f.channel_mut(c);
        let mut acc = 0.0;
        for k in 0..n {
            out[k] = a[k] * qc - b[k] * plane[k];
            acc += a[k] * plane[k];
        }
        grad_q[c] = acc - gq_self * qc;
    }
    Ok((grad_f, grad_q))
}

/// Scatter a query-feature gradient back onto the frame it was sampled from.
pub fn scatter_query_gradient(
    grad_frame: &mut Grid<f64>,
    point: Point<f64>,
    grad_q: &[f64],
) -> Result<()> {
    let taps = bilinear_taps(point, grad_frame.height(), grad_frame.width())?;
    for (c, &g) in grad_q.iter().enumerate() {
        for &(i, j, wt) in &taps {
            *grad_frame.get_mut(c, i, j) += wt * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random_video(rng: &mut SeededRng, t: usize, d: usize, h: usize, w: usize) -> FeatureVideo<f64> {
        let frames = (0..t)
            .map(|_| Grid::from_fn(d, h, w, |_, _, _| rng.normal()))
            .collect();
        FeatureVideo::new(frames, 8, ((h * 8) as u32, (w * 8) as u32)).unwrap()
    }

    // Four-corner formula written out independently of `bilinear_sample`.
    fn brute_bilinear(f: &Grid<f64>, x: f64, y: f64) -> Vec<f64> {
        let x = x.clamp(0.0, (f.width() - 1) as f64);
        let y = y.clamp(0.0, (f.height() - 1) as f64);
        let (xl, yl) = (x.floor() as usize, y.floor() as usize);
        let (xh, yh) = ((xl + 1).min(f.width() - 1), (yl + 1).min(f.height() - 1));
        let (ax, ay) = (x - xl as f64, y - yl as f64);
        (0..f.channels())
            .map(|c| {
                f.get(c, yl, xl) * (1.0 - ax) * (1.0 - ay)
                    + f.get(c, yl, xh) * ax * (1.0 - ay)
                    + f.get(c, yh, xl) * (1.0 - ax) * ay
                    + f.get(c, yh, xh) * ax * ay
            })
            .collect()
    }

    fn brute_cosine(f: &Grid<f64>, q: &[f64], i: usize, j: usize) -> f64 {
        let v = f.cell(i, j);
        let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
        let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv == 0.0 {
            0.0
        } else {
            dot / (nv * nq)
        }
    }

    #[test]
    fn query_feature_examples() {
        let mut rng = SeededRng::new(1);
        let video = random_video(&mut rng, 3, 4, 5, 6);
        let q = extract_query_feature(&video, &Query::new(2, Point::new(3.0, 1.0))).unwrap();
        assert_eq!(q, video.frames()[2].cell(1, 3));

        let f = Grid::from_fn(2, 1, 2, |c, _, j| if c == 0 { j as f64 * 4.0 } else { 7.0 });
        let v = FeatureVideo::new(vec![f], 1, (1, 2)).unwrap();
        let q = extract_query_feature(&v, &Query::new(0, Point::new(0.5, 0.0))).unwrap();
        assert_eq!(q, vec![2.0, 7.0]);

        for _ in 0..20 {
            let p = Point::new(rng.uniform_range(-1.0, 7.0), rng.uniform_range(-1.0, 6.0));
            let q = extract_query_feature(&video, &Query::new(1, p)).unwrap();
            let want = brute_bilinear(&video.frames()[1], p.x, p.y);
            for (a, b) in q.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(extract_query_feature(&video, &Query::new(3, Point::new(0.0, 0.0))).is_err());
    }

    #[test]
    fn correlation_examples() {
        let mut rng = SeededRng::new(2);
        let video = random_video(&mut rng, 1, 5, 4, 4);
        let frame = &video.frames()[0];
        let q = frame.cell(2, 3);
        assert_eq!(correlation_map(frame, &q).unwrap().get(0, 2, 3), 1.0);

        let ortho = Grid::from_fn(2, 3, 3, |c, i, j| if c == 0 { (i + j) as f64 } else { 0.0 });
        let c = correlation_map(&ortho, &[0.0, 1.0]).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        assert!(correlation_map(frame, &[1.0, 2.0]).is_err());
        assert!(correlation_map(frame, &[0.0; 5]).is_err());
    }

    #[test]
    fn correlation_scale_invariance_is_exact() {
        // Integer features with integer norms keep every operation exact.
        let cells = [[2.0, 1.0, 2.0], [0.0, 3.0, 4.0], [1.0, 0.0, 0.0], [-2.0, 2.0, 1.0]];
        let frame = Grid::from_fn(3, 2, 2, |c, i, j| cells[i * 2 + j][c]);
        let q = [1.0, 2.0, 2.0];
        let q3: Vec<f64> = q.iter().map(|v| 3.0 * v).collect();
        assert_eq!(
            correlation_map(&frame, &q).unwrap(),
            correlation_map(&frame, &q3).unwrap()
        );
    }

    #[test]
    fn correlation_volume_examples() {
        let mut rng = SeededRng::new(3);
        let video = random_video(&mut rng, 4, 6, 5, 7);
        let query = Query::new(1, Point::new(4.0, 2.0));
        let vol = correlation_volume(&video, &query).unwrap();
        assert_eq!(vol[1].get(0, 2, 4), 1.0);
        let q = video.frames()[1].cell(2, 4);
        for (t, c) in vol.iter().enumerate() {
            for i in 0..5 {
                for j in 0..7 {
                    let want = brute_cosine(&video.frames()[t], &q, i, j);
                    assert!((c.get(0, i, j) - want).abs() < 1e-12);
                }
            }
        }

        let f = video.frames()[0].clone();
        let same = FeatureVideo::new(vec![f.clone(), f.clone(), f], 8, (40, 56)).unwrap();
        let vol = correlation_volume(&same, &Query::new(0, Point::new(1.3, 2.2))).unwrap();
        assert_eq!(vol[0], vol[1]);
        assert_eq!(vol[1], vol[2]);
    }

    #[test]
    fn zero_shot_examples() {
        let mut rng = SeededRng::new(4);
        let video = random_video(&mut rng, 1, 8, 6, 6);
        let tr = zero_shot_track(&video, &Query::new(0, Point::new(4.0, 1.0))).unwrap();
        assert_eq!(tr.points, vec![Point::new(4.0, 1.0)]);
        assert_eq!(tr.visible, vec![true]);
        assert!(tr.occlusion_prob.is_none());

        let constant = Grid::filled(3, 4, 4, 0.5);
        let v = FeatureVideo::new(vec![constant.clone(), constant], 4, (16, 16)).unwrap();
        let tr = zero_shot_track(&v, &Query::new(1, Point::new(2.5, 3.0))).unwrap();
        assert!(tr.points.iter().all(|p| *p == Point::new(0.0, 0.0)));
    }

    #[test]
    fn zero_norm_cells_get_zero_similarity() {
        let mut f = Grid::<f64>::zeros(2, 2, 2);
        *f.get_mut(0, 1, 1) = 1.0;
        let c = correlation_map(&f, &[1.0, 1.0]).unwrap();
        assert_eq!(c.get(0, 0, 0), 0.0);
        assert!((c.get(0, 1, 1) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn geometry_round_trip() {
        let g = GridGeometry {
            grid_h: 32,
            grid_w: 32,
            source_h: 256,
            source_w: 256,
        };
        assert_eq!(g.to_pixels(Point::new(0.0, 31.0)), Point::new(4.0, 252.0));
        let p = Point::new(3.25, 17.5);
        let back = g.to_grid(g.to_pixels(p));
        assert!((back.x - p.x).abs() < 1e-12 && (back.y - p.y).abs() < 1e-12);
    }

    #[test]
    fn correlation_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let frame = Grid::from_fn(3, 3, 4, |_, _, _| rng.normal());
        let q: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let weights = Grid::from_fn(1, 3, 4, |_, _, _| rng.normal());
        let loss = |f: &Grid<f64>, q: &[f64]| -> f64 {
            let c = correlation_map(f, q).unwrap();
            c.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let (gf, gq) = correlation_map_backward(&frame, &q, &weights).unwrap();
        let h = 1e-6;
        for k in 0..frame.data().len() {
            let mut p = frame.clone();
            p.data_mut()[k] += h;
            let mut m = frame.clone();
            m.data_mut()[k] -= h;
            let num = (loss(&p, &q) - loss(&m, &q)) / (2.0 * h);
            assert!((num - gf.data()[k]).abs() < 1e-7);
        }
        for c in 0..3 {
            let mut p = q.clone();
            p[c] += h;
            let mut m = q.clone();
            m[c] -= h;
            let num = (loss(&frame, &p) - loss(&frame, &m)) / (2.0 * h);
            assert!((num - gq[c]).abs() < 1e-7);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn correlation_bounded_and_brute_force_tracking(seed in any::<u64>(), t in 1usize..4, d in 1usize..6, h in 1usize..6, w in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let video = random_video(&mut rng, t, d, h, w);
            let query = Query::new(rng.below(t), Point::new(rng.uniform_range(0.0, (w - 1) as f64), rng.uniform_range(0.0, (h - 1) as f64)));
            let q = extract_query_feature(&video, &query).unwrap();
            prop_assume!(q.iter().any(|&v| v != 0.0));
            let vol = correlation_volume(&video, &query).unwrap();
            prop_assert!(vol.iter().flat_map(|c| c.data().iter()).all(|&v| (-1.0..=1.0).contains(&v)));

            let tr = zero_shot_track(&video, &query).unwrap();
            for (frame, p) in video.frames().iter().zip(&tr.points) {
                // nearest neighbour in cosine similarity, first occurrence wins
                let mut best = (0usize, 0usize, f64::NEG_INFINITY);
                for i in 0..h {
                    for j in 0..w {
                        let s = brute_cosine(frame, &q, i, j);
                        if s > best.2 + 1e-12 {
                            best = (i, j, s);
                        }
                    }
                }
                let got = brute_cosine(frame, &q, p.y as usize, p.x as usize);
                prop_assert!((got - best.2).abs() < 1e-12);
            }
        }

        #[test]
        fn power_of_two_rescaling_is_bit_identical(seed in any::<u64>(), e in -8i32..8) {
            let mut rng = SeededRng::new(seed);
            let video = random_video(&mut rng, 3, 4, 5, 5);
            let query = Query::new(0, Point::new(2.0, 2.0));
            let q = extract_query_feature(&video, &query).unwrap();
            let s = 2f64.powi(e);
            let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
            for f in video.frames() {
                prop_assert_eq!(correlation_map(f, &q).unwrap(), correlation_map(f, &qs).unwrap());
            }
        }

        #[test]
        fn positive_rescaling_keeps_tracks(seed in any::<u64>(), s in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed);
            let video = random_video(&mut rng, 3, 4, 5, 5);
            let query = Query::new(1, Point::new(1.0, 3.0));
            let q = extract_query_feature(&video, &query).unwrap();
            let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
            for f in video.frames() {
                let a = correlation_map(f, &q).unwrap();
                let b = correlation_map(f, &qs).unwrap();
                let mut sorted: Vec<f64> = a.data().to_vec();
                sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
                prop_assume!(sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9);
                prop_assert_eq!(argmax2d(&a).unwrap(), argmax2d(&b).unwrap());
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() < 1e-14);
                }
            }
        }

        #[test]
        fn channel_permutation_invariance(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let video = random_video(&mut rng, 2, 5, 4, 3);
            let mut perm: Vec<usize> = (0..5).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<Grid<f64>> = video.frames().iter()
                .map(|f| Grid::from_fn(5, 4, 3, |c, i, j| f.get(perm[c], i, j)))
                .collect();
            let pv = FeatureVideo::new(permuted, 8, (32, 24)).unwrap();
            let query = Query::new(1, Point::new(1.5, 2.25));
            let a = correlation_volume(&video, &query).unwrap();
            let b = correlation_volume(&pv, &query).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }
}
