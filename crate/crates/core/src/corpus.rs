//! Procedural clean HR images: smooth gradients overlaid with anti-aliased
//! shapes, oriented gratings and checkerboards. Gives the desk-scale
//! experiments edges and textures at many frequencies without shipping data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::IoContext;
use crate::imaging::{write_png, ColorSpace, ImageTensor};
use crate::seeding::{derive, rng_for};
use crate::Result;

const SUPERSAMPLE: usize = 3;

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, rot: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Grating { cy: f64, cx: f64, radius: f64, freq: f64, angle: f64, phase: f64 },
    Checker { y0: f64, x0: f64, y1: f64, x1: f64, cell: f64 },
}

struct Layer {
    shape: Shape,
    color: [f64; 3],
    alt: [f64; 3],
}

impl Layer {
    /// `None` outside the shape, otherwise the color at `(y, x)`.
    fn sample(&self, y: f64, x: f64) -> Option<[f64; 3]> {
        match self.shape {
            Shape::Ellipse { cy, cx, ry, rx, rot } => {
                let (s, c) = rot.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                ((u / rx).powi(2) + (v / ry).powi(2) <= 1.0).then_some(self.color)
            }
            Shape::Rect { y0, x0, y1, x1 } => (y >= y0 && y < y1 && x >= x0 && x < x1).then_some(self.color),
            Shape::Grating { cy, cx, radius, freq, angle, phase } => {
                let (dy, dx) = (y - cy, x - cx);
                if dy * dy + dx * dx > radius * radius {
                    return None;
                }
                let t = (dx * angle.cos() + dy * angle.sin()) * freq + phase;
                let a = 0.5 + 0.5 * t.sin();
                Some([0, 1, 2].map(|k| a * self.color[k] + (1.0 - a) * self.alt[k]))
            }
            Shape::Checker { y0, x0, y1, x1, cell } => {
                if !(y >= y0 && y < y1 && x >= x0 && x < x1) {
                    return None;
                }
                let parity = (((y - y0) / cell).floor() as i64 + ((x - x0) / cell).floor() as i64) & 1;
                Some(if parity == 0 { self.color } else { self.alt })
            }
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// One deterministic `height x width` RGB image.
pub fn procedural_image(height: usize, width: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = rng_for(seed, 0);
    let (hf, wf) = (height as f64, width as f64);
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos() / wf, angle.sin() / hf);

    let n_layers = rng.random_range(4..=9);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let color = random_color(&mut rng);
        let alt = random_color(&mut rng);
        let cy = rng.random_range(0.0..hf);
        let cx = rng.random_range(0.0..wf);
        let extent = rng.random_range(0.1..0.45) * hf.min(wf);
        let shape = match rng.random_range(0..4) {
            0 => Shape::Ellipse {
                cy,
                cx,
                ry: extent,
                rx: extent * rng.random_range(0.3..1.0),
                rot: rng.random_range(0.0..std::f64::consts::PI),
            },
            1 => Shape::Rect { y0: cy - extent, x0: cx - extent * 0.7, y1: cy + extent * 0.6, x1: cx + extent },
            2 => Shape::Grating {
                cy,
                cx,
                radius: extent * 1.3,
                // periods from ~3 to ~16 pixels
                freq: std::f64::consts::TAU / rng.random_range(3.0..16.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            },
            _ => Shape::Checker {
                y0: cy - extent,
                x0: cx - extent,
                y1: cy + extent,
                x1: cx + extent,
                cell: rng.random_range(2.0..8.0),
            },
        };
        layers.push(Layer { shape, color, alt });
    }

    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let t = (0.5 + (px - wf / 2.0) * ga + (py - hf / 2.0) * gb).clamp(0.0, 1.0);
                    let mut col = [0, 1, 2].map(|k| (1.0 - t) * c0[k] + t * c1[k]);
                    for layer in &layers {
                        if let Some(c) = layer.sample(py, px) {
                            col = c;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += col[k] * inv;
                    }
                }
            }
            data.extend_from_slice(&acc);
        }
    }
    ImageTensor::new_clipped(height, width, 3, data, ColorSpace::Rgb)
}

pub fn procedural_corpus(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    (0..count).map(|i| procedural_image(height, width, derive(seed, i as u64))).collect()
}

/// Writes `img_0000.png`, `img_0001.png`, ... into `dir`.
pub fn write_corpus(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).at(dir)?;
    let images = procedural_corpus(count, height, width, seed)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("img_{i:04}.png"));
            write_png(img, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = procedural_image(32, 40, 3).unwrap();
        let b = procedural_image(32, 40, 3).unwrap();
        let c = procedural_image(32, 40, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.height(), a.width(), a.channels()), (32, 40, 3));
        let mean = a.data().iter().sum::<f64>() / a.data().len() as f64;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.data().len() as f64;
        assert!(var > 1e-4, "image should not be flat");
    }
}
