//! Dense grid kernels: bilinear sampling, resizing, spatial softmax and
//! hard/soft argmax.
//!
//! Geometry convention: a point is `(x, y)` with `x` the column. Cell `(i, j)`
//! has its center at `(x = j, y = i)`, so the valid domain of a `H x W` grid is
//! `[0, W-1] x [0, H-1]`. Coordinates outside the domain are clamped (border
//! replication).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// A `channels x height x width` array stored row-major as (channel, row, column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<S> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<S>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point<S> {
    pub x: S,
    pub y: S,
}

impl<S: Real> Point<S> {
    pub fn new(x: S, y: S) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cast<T: Real>(self) -> Point<T> {
        Point::new(T::of(self.x.as_f64()), T::of(self.y.as_f64()))
    }

    pub fn distance(&self, other: &Self) -> S {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Clamp into `[0, width-1] x [0, height-1]`.
    pub fn clamped(self, height: usize, width: usize) -> Self {
        let maxx = S::of((width - 1) as f64);
        let maxy = S::of((height - 1) as f64);
        Point::new(
            self.x.max(S::zero()).min(maxx),
            self.y.max(S::zero()).min(maxy),
        )
    }
}

impl<S: Real> Grid<S> {
    /// Validating constructor: positive dimensions, matching length, finite values.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return invalid(format!(
                "grid dimensions must be positive, got {channels}x{height}x{width}"
            ));
        }
        if data.len() != channels * height * width {
            return invalid(format!(
                "grid data length {} does not match {channels}x{height}x{width}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite grid value at flat index {pos}"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty grid");
        Self {
            channels,
            height,
            width,
            data: vec![S::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: S) -> Self {
        let mut g = Self::zeros(channels, height, width);
        g.data.fill(value);
        g
    }

    /// Build from `f(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        let mut g = Self::zeros(channels, height, width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    g.data[(c * height + i) * width + j] = f(c, i, j);
                }
            }
        }
        g
    }

    /// Single-channel grid from nested rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return invalid("ragged rows");
        }
        Self::new(1, h, w, rows.concat())
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> S {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn get_mut(&mut self, c: usize, i: usize, j: usize) -> &mut S {
        &mut self.data[(c * self.height + i) * self.width + j]
    }

    /// The plane of one channel, `height * width` values.
    pub fn channel(&self, c: usize) -> &[S] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [S] {
        let n = self.cells();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Feature vector of cell `(i, j)` across channels.
    pub fn cell(&self, i: usize, j: usize) -> Vec<S> {
        (0..self.channels).map(|c| self.get(c, i, j)).collect()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> Grid<T> {
        Grid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    fn require_single_channel(&self, op: &str) -> Result<()> {
        if self.channels != 1 {
            return invalid(format!(
                "{op} expects a single-channel map, got {} channels",
                self.channels
            ));
        }
        Ok(())
    }
}

/// The four cells and weights bilinear interpolation uses at `p` (after clamping).
/// Weights sum to one; at integer coordinates the first entry has weight one.
pub fn bilinear_taps<S: Real>(p: Point<S>, height: usize, width: usize) -> Result<[(usize, usize, S); 4]> {
    if !p.is_finite() {
        return invalid(format!("non-finite sample coordinate ({}, {})", p.x, p.y));
    }
    let p = p.clamped(height, width);
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    let fx = p.x - x0;
    let fy = p.y - y0;
    let j0 = x0.as_f64() as usize;
    let i0 = y0.as_f64() as usize;
    let j1 = (j0 + 1).min(width - 1);
    let i1 = (i0 + 1).min(height - 1);
    let one = S::one();
    Ok([
        (i0, j0, (one - fy) * (one - fx)),
        (i0, j1, (one - fy) * fx),
        (i1, j0, fy * (one - fx)),
        (i1, j1, fy * fx),
    ])
}

/// Bilinear interpolation of every channel at `p`. Exact at cell centers.
pub fn bilinear_sample<S: Real>(map: &Grid<S>, p: Point<S>) -> Result<Vec<S>> {
    if !p.is_finite() {
        return invalid(format!("non-finite sample coordinate ({}, {})", p.x, p.y));
    }
    let p = p.clamped(map.height, map.width);
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    let fx = p.x - x0;
    let fy = p.y - y0;
    let j0 = x0.as_f64() as usize;
    let i0 = y0.as_f64() as usize;
    let j1 = (j0 + 1).min(map.width - 1);
    let i1 = (i0 + 1).min(map.height - 1);
    let one = S::one();
    Ok((0..map.channels)
        .map(|c| {
            let top = (one - fx) * map.get(c, i0, j0) + fx * map.get(c, i0, j1);
            let bottom = (one - fx) * map.get(c, i1, j0) + fx * map.get(c, i1, j1);
            (one - fy) * top + fy * bottom
        })
        .collect())
}

/// Location of the maximum; ties go to the first cell in row-major order.
pub fn argmax2d<S: Real>(map: &Grid<S>) -> Result<Point<S>> {
    map.require_single_channel("argmax2d")?;
    let data = map.channel(0);
    if data.iter().any(|v| v.is_nan()) {
        return invalid("argmax2d: map contains NaN");
    }
    let mut best = 0;
    for (k, &v) in data.iter().enumerate().skip(1) {
        if v > data[best] {
            best = k;
        }
    }
    Ok(Point::new(
        S::of((best % map.width) as f64),
        S::of((best / map.width) as f64),
    ))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    Ok(())
}

/// Spatial softmax of `map / temperature` with max subtraction; sums to one.
pub fn softmax2d<S: Real>(map: &Grid<S>, temperature: f64) -> Result<Grid<S>> {
    check_temperature(temperature)?;
    map.require_single_channel("softmax2d")?;
    let data = map.channel(0);
    let max = data
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = data
        .iter()
        .map(|v| ((v.as_f64() - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(Grid {
        channels: 1,
        height: map.height,
        width: map.width,
        data: exps.into_iter().map(|e| S::of(e / total)).collect(),
    })
}

/// Expected `(x, y)` under a spatial probability map.
pub fn expected_coordinates<S: Real>(probs: &Grid<S>) -> Point<S> {
    let (mut ex, mut ey) = (0.0f64, 0.0f64);
    for i in 0..probs.height {
        for j in 0..probs.width {
            let p = probs.get(0, i, j).as_f64();
            ex += p * j as f64;
            ey += p * i as f64;
        }
    }
    Point::new(S::of(ex), S::of(ey))
}

/// Differentiable point estimate: expectation of grid coordinates under
/// `softmax(map / temperature)` over the full map.
pub fn soft_argmax2d<S: Real>(map: &Grid<S>, temperature: f64) -> Result<Point<S>> {
    let probs = softmax2d(map, temperature)?;
    Ok(expected_coordinates(&probs).clamped(map.height, map.width))
}

/// Gradient of a scalar loss w.r.t. the soft-argmax input map, given the
/// softmax probabilities, the resulting point and `dL/dpoint`.
pub fn soft_argmax2d_backward<S: Real>(
    probs: &Grid<S>,
    point: Point<S>,
    grad: Point<S>,
    temperature: f64,
) -> Grid<S> {
    let inv_t = S::of(1.0 / temperature);
    Grid::from_fn(1, probs.height, probs.width, |_, i, j| {
        let p = probs.get(0, i, j);
        let dx = S::of(j as f64) - point.x;
        let dy = S::of(i as f64) - point.y;
        p * (grad.x * dx + grad.y * dy) * inv_t
    })
}

/// Source coordinate for destination index `d` when resampling `input` cells to
/// `output` cells: `s = (d + 0.5) * (input / output) - 0.5`, clamped to
/// `[0, input - 1]` (half-pixel centers, no corner alignment).
pub fn resize_source_coordinate(d: usize, input: usize, output: usize) -> f64 {
    let s = (d as f64 + 0.5) * (input as f64 / output as f64) - 0.5;
    s.clamp(0.0, (input - 1) as f64)
}

/// Bilinear resampling of every channel to `new_h x new_w`.
pub fn resize_bilinear<S: Real>(map: &Grid<S>, new_h: usize, new_w: usize) -> Result<Grid<S>> {
    if new_h == 0 || new_w == 0 {
        return invalid(format!("resize target must be positive, got {new_h}x{new_w}"));
    }
    if (new_h, new_w) == (map.height, map.width) {
        return Ok(map.clone());
    }
    let xs: Vec<f64> = (0..new_w)
        .map(|d| resize_source_coordinate(d, map.width, new_w))
        .collect();
    let ys: Vec<f64> = (0..new_h)
        .map(|d| resize_source_coordinate(d, map.height, new_h))
        .collect();
    let mut out = Grid::zeros(map.channels, new_h, new_w);
    for (i, &sy) in ys.iter().enumerate() {
        for (j, &sx) in xs.iter().enumerate() {
            let taps = bilinear_taps(Point::new(S::of(sx), S::of(sy)), map.height, map.width)?;
            for c in 0..map.channels {
                let v = taps
                    .iter()
                    .fold(S::zero(), |acc, &(ti, tj, w)| acc + w * map.get(c, ti, tj));
                *out.get_mut(c, i, j) = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square() -> Grid<f64> {
        Grid::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        let m = square();
        assert_eq!(bilinear_sample(&m, Point::new(0.5, 0.5)).unwrap(), vec![1.5]);
        assert_eq!(bilinear_sample(&m, Point::new(0.0, 0.0)).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&m, Point::new(1.0, 0.0)).unwrap(), vec![1.0]);
        // clamped to the border
        assert_eq!(bilinear_sample(&m, Point::new(5.0, -3.0)).unwrap(), vec![1.0]);
        assert!(bilinear_sample(&m, Point::new(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn grid_constructor_rejects_bad_data() {
        assert!(Grid::<f64>::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Grid::<f64>::new(0, 2, 2, vec![]).is_err());
        assert!(Grid::new(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn argmax_examples() {
        let mut m = Grid::<f64>::zeros(1, 3, 3);
        *m.get_mut(0, 2, 1) = 5.0;
        assert_eq!(argmax2d(&m).unwrap(), Point::new(1.0, 2.0));
        assert_eq!(argmax2d(&Grid::<f64>::filled(1, 3, 3, 0.7)).unwrap(), Point::new(0.0, 0.0));
        let mut ties = Grid::<f64>::zeros(1, 3, 3);
        *ties.get_mut(0, 0, 2) = 1.0;
        *ties.get_mut(0, 1, 0) = 1.0;
        assert_eq!(argmax2d(&ties).unwrap(), Point::new(2.0, 0.0));
        let nan = Grid::from_fn(1, 2, 2, |_, i, _| if i == 1 { f64::NAN } else { 0.0 });
        assert!(argmax2d(&nan).is_err());
        assert!(argmax2d(&Grid::<f64>::zeros(2, 2, 2)).is_err());
    }

    #[test]
    fn soft_argmax_examples() {
        let sym: Grid<f64> = Grid::from_rows(&[
            vec![0.1, 0.5, 0.1],
            vec![0.5, 2.0, 0.5],
            vec![0.1, 0.5, 0.1],
        ])
        .unwrap();
        let p = soft_argmax2d(&sym, 1.0).unwrap();
        assert!((p.x - 1.0).abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12);

        let uni = Grid::<f64>::filled(1, 4, 7, 0.3);
        let p = soft_argmax2d(&uni, 1.0).unwrap();
        assert!((p.x - 3.0).abs() < 1e-12 && (p.y - 1.5).abs() < 1e-12);

        assert!(soft_argmax2d(&uni, 0.0).is_err());
        assert!(soft_argmax2d(&uni, -1.0).is_err());
    }

    #[test]
    fn soft_argmax_peak_20_is_near_hard_argmax() {
        // Direct evaluation: 24 background cells of weight 1 against e^20.
        let mut m = Grid::<f64>::zeros(1, 5, 5);
        *m.get_mut(0, 3, 1) = 20.0;
        let p = soft_argmax2d(&m, 1.0).unwrap();
        let bg = (-20.0f64).exp();
        let z = 1.0 + 24.0 * bg;
        // sum of column indices over the other 24 cells is 5*10 - 1 = 49
        let ex = (1.0 + 49.0 * bg) / z;
        let ey = (3.0 + 47.0 * bg) / z;
        assert!((p.x - ex).abs() < 1e-12 && (p.y - ey).abs() < 1e-12);
        assert!((p.x - 1.0).abs() < 1e-3 && (p.y - 3.0).abs() < 1e-3);
    }

    #[test]
    fn soft_argmax_saturated_peak() {
        let mut m = Grid::<f64>::zeros(1, 6, 9);
        *m.get_mut(0, 4, 7) = 1e4;
        let p = soft_argmax2d(&m, 1.0).unwrap();
        assert!((p.x - 7.0).abs() < 1e-6 && (p.y - 4.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let uni = softmax2d(&Grid::<f64>::filled(1, 3, 4, -2.0), 1.0).unwrap();
        assert!(uni.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let mut m = Grid::<f64>::zeros(1, 3, 3);
        *m.get_mut(0, 1, 2) = 1e4;
        let s = softmax2d(&m, 1.0).unwrap();
        assert!((s.get(0, 1, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_gradient_matches_finite_differences() {
        let m = Grid::from_fn(1, 3, 4, |_, i, j| ((i * 4 + j) as f64 * 0.7).sin());
        let (gx, gy) = (0.3, -1.1);
        let t = 0.8;
        let probs = softmax2d(&m, t).unwrap();
        let p = expected_coordinates(&probs);
        let g = soft_argmax2d_backward(&probs, p, Point::new(gx, gy), t);
        let h = 1e-6;
        for k in 0..12 {
            let mut plus = m.clone();
            plus.data_mut()[k] += h;
            let mut minus = m.clone();
            minus.data_mut()[k] -= h;
            let fp = soft_argmax2d(&plus, t).unwrap();
            let fm = soft_argmax2d(&minus, t).unwrap();
            let num = (gx * (fp.x - fm.x) + gy * (fp.y - fm.y)) / (2.0 * h);
            assert!((num - g.data()[k]).abs() < 1e-8, "cell {k}");
        }
    }

    #[test]
    fn resize_examples() {
        let m = Grid::from_fn(2, 3, 5, |c, i, j| (c * 100 + i * 10 + j) as f64);
        assert_eq!(resize_bilinear(&m, 3, 5).unwrap(), m);
        let c = resize_bilinear(&Grid::<f64>::filled(1, 2, 2, 4.25), 4, 4).unwrap();
        assert!(c.data().iter().all(|&v| v == 4.25));
        // s = (d + 0.5) * 0.5 - 0.5 -> [-0.25, 0.25, 0.75, 1.25] clamped to [0, 1]
        let r = resize_bilinear(&Grid::from_rows(&[vec![0.0, 1.0]]).unwrap(), 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(resize_bilinear(&m, 0, 3).is_err());
    }

    fn small_map() -> impl Strategy<Value = Grid<f64>> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            prop::collection::vec(-10.0f64..10.0, h * w)
                .prop_map(move |d| Grid::new(1, h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn bilinear_exact_at_integer_coordinates(m in small_map(), i in 0usize..6, j in 0usize..6) {
            let (i, j) = (i % m.height(), j % m.width());
            let v = bilinear_sample(&m, Point::new(j as f64, i as f64)).unwrap();
            prop_assert_eq!(v[0], m.get(0, i, j));
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(m in small_map(), shift in -50.0f64..50.0, t in 0.1f64..4.0) {
            let a = softmax2d(&m, t).unwrap();
            let b = softmax2d(&m.map(|v| v + shift), t).unwrap();
            let total: f64 = a.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(a.data().iter().all(|&v| v >= 0.0));
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_invariant_under_monotone_transform(m in small_map()) {
            let a = argmax2d(&m).unwrap();
            let b = argmax2d(&m.map(|v| (0.3 * v).exp() * 2.0 + 1.0)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn soft_argmax_stays_in_domain(m in small_map(), t in 0.05f64..5.0) {
            let p = soft_argmax2d(&m, t).unwrap();
            prop_assert!(p.x >= 0.0 && p.x <= (m.width() - 1) as f64);
            prop_assert!(p.y >= 0.0 && p.y <= (m.height() - 1) as f64);
        }
    }
}
