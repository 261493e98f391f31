//! Procedural grayscale images for smoke tests and toy training runs when no
//! natural-image corpus is at hand: a shaded background, flat and shaded
//! shapes with anti-aliased edges, and a little periodic texture.

use rand::Rng;
use r3l_core::image::ImageBuffer;
use r3l_core::rng::{self, Stream};

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    /// Signed distance-like value: negative inside, in pixels.
    fn edge(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let d = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
                (d - 1.0) * ry.min(rx)
            }
            Shape::Rect { y0, x0, y1, x1 } => {
                let dy = (y0 - y).max(y - y1);
                let dx = (x0 - x).max(x - x1);
                dy.max(dx)
            }
        }
    }
}

pub fn generate(width: usize, height: usize, rng: &mut Stream) -> ImageBuffer {
    let (w, h) = (width as f64, height as f64);
    let base = rng.random_range(60.0..190.0);
    let gy = rng.random_range(-60.0..60.0) / h;
    let gx = rng.random_range(-60.0..60.0) / w;
    let mut canvas: Vec<f64> = (0..height * width)
        .map(|i| base + gy * (i / width) as f64 + gx * (i % width) as f64)
        .collect();

    let n_shapes = rng.random_range(4..9);
    for _ in 0..n_shapes {
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                ry: rng.random_range(h * 0.08..h * 0.35),
                rx: rng.random_range(w * 0.08..w * 0.35),
            }
        } else {
            let (y0, x0) = (rng.random_range(-0.1 * h..0.8 * h), rng.random_range(-0.1 * w..0.8 * w));
            Shape::Rect {
                y0,
                x0,
                y1: y0 + rng.random_range(0.15 * h..0.5 * h),
                x1: x0 + rng.random_range(0.15 * w..0.5 * w),
            }
        };
        let level = rng.random_range(25.0..230.0);
        let shade_y = rng.random_range(-30.0..30.0) / h;
        let shade_x = rng.random_range(-30.0..30.0) / w;
        let texture = if rng.random_bool(0.3) {
            Some((
                rng.random_range(4.0..12.0),
                rng.random_range(0.15..0.9),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::PI),
            ))
        } else {
            None
        };
        for y in 0..height {
            for x in 0..width {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let e = shape.edge(fy, fx);
                if e >= 1.0 {
                    continue;
                }
                let cover = (0.5 - e * 0.5).clamp(0.0, 1.0);
                let mut v = level + shade_y * fy + shade_x * fx;
                if let Some((amp, freq, phase, angle)) = texture {
                    let t = fy * angle.sin() + fx * angle.cos();
                    v += amp * (t * freq + phase).sin();
                }
                let c = &mut canvas[y * width + x];
                *c = *c * (1.0 - cover) + v * cover;
            }
        }
    }
    let pixels = canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    ImageBuffer::new(width, height, pixels).expect("canvas sized from dimensions")
}

/// `count` images; image `i` depends only on `(seed, i)`.
pub fn corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<ImageBuffer> {
    (0..count)
        .map(|i| generate(width, height, &mut rng::stream(rng::derive_seed(&[seed, i as u64]))))
        .collect()
}
