//! Correlation heatmaps as binary PPM (`P6`) images.
//!
//! Colormap: similarity is clamped to [-1, 1] and mapped linearly through
//! three anchors, blue (59, 76, 192) at -1, light gray (221, 221, 221) at 0 and
//! red (180, 4, 38) at +1, so warmer colors mean higher similarity. The range
//! is fixed, never rescaled per image, so maps from different frames and
//! runs compare directly.

use std::fs;
use std::path::Path;

use fmtrack_core::tensor::{Grid, Point};
use fmtrack_core::Result;

const COLD: [f64; 3] = [59.0, 76.0, 192.0];
const MID: [f64; 3] = [221.0, 221.0, 221.0];
const WARM: [f64; 3] = [180.0, 4.0, 38.0];

pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    let (a, b, t) = if v < 0.0 { (COLD, MID, v + 1.0) } else { (MID, WARM, v) };
    std::array::from_fn(|c| (a[c] + t * (b[c] - a[c])).round() as u8)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Plus sign: ground truth.
    Cross,
    /// Hollow square: prediction.
    Square,
}

#[derive(Clone, Copy, Debug)]
pub struct Marker {
    /// Grid units.
    pub at: Point<f64>,
    pub color: [u8; 3],
    pub shape: Shape,
}

pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    fn put(&mut self, x: isize, y: isize, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let k = 3 * (y as usize * self.width + x as usize);
            self.rgb[k..k + 3].copy_from_slice(&color);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Each cell becomes a `scale x scale` block; markers are drawn on top.
pub fn render_heatmap(map: &Grid<f64>, scale: usize, markers: &[Marker]) -> Image {
    let scale = scale.max(1);
    let (h, w) = (map.height(), map.width());
    let mut img = Image {
        width: w * scale,
        height: h * scale,
        rgb: vec![0; 3 * w * h * scale * scale],
    };
    for i in 0..h {
        for j in 0..w {
            let c = colormap(map.get(0, i, j));
            for y in i * scale..(i + 1) * scale {
                for x in j * scale..(j + 1) * scale {
                    img.put(x as isize, y as isize, c);
                }
            }
        }
    }
    let r = (scale as isize / 2).max(2);
    for m in markers {
        let cx = ((m.at.x + 0.5) * scale as f64).floor() as isize;
        let cy = ((m.at.y + 0.5) * scale as f64).floor() as isize;
        for d in -r..=r {
            match m.shape {
                Shape::Cross => {
                    img.put(cx + d, cy, m.color);
                    img.put(cx, cy + d, m.color);
                }
                Shape::Square => {
                    img.put(cx + d, cy - r, m.color);
                    img.put(cx + d, cy + r, m.color);
                    img.put(cx - r, cy + d, m.color);
                    img.put(cx + r, cy + d, m.color);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_anchors_and_clamping() {
        assert_eq!(colormap(-1.0), [59, 76, 192]);
        assert_eq!(colormap(0.0), [221, 221, 221]);
        assert_eq!(colormap(1.0), [180, 4, 38]);
        assert_eq!(colormap(5.0), colormap(1.0));
        assert_eq!(colormap(-3.0), colormap(-1.0));
    }

    #[test]
    fn ppm_header_and_size() {
        let map = Grid::from_fn(1, 2, 3, |_, i, j| (i + j) as f64 / 3.0 - 0.5);
        let img = render_heatmap(&map, 4, &[]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n12 8\n255\n"));
        assert_eq!(bytes.len(), "P6\n12 8\n255\n".len() + 12 * 8 * 3);
        // cell (1, 2) fills pixels 8..12 x 4..8
        let k = 3 * (5 * 12 + 9);
        assert_eq!(img.rgb[k..k + 3], colormap(map.get(0, 1, 2)));
    }

    #[test]
    fn markers_are_drawn_at_cell_centers() {
        let map = Grid::zeros(1, 4, 4);
        let green = [0, 255, 0];
        let img = render_heatmap(
            &map,
            8,
            &[Marker { at: Point::new(1.0, 2.0), color: green, shape: Shape::Cross }],
        );
        let k = 3 * (20 * 32 + 12);
        assert_eq!(img.rgb[k..k + 3], green);
    }
}
