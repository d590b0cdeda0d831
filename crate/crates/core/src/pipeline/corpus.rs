//! Deterministic synthetic image corpus: smooth textures plus flat-coloured
//! geometric shapes.
//!
//! Image `i` of the corpus with seed `s` is a pure function of `(s, i)`:
//! its draws come from `RngStream::new(s, purpose::DATA_GEN).substream(i)`.
//! Each image is a background made of a base level plus three
//! low-frequency plane waves (at most two cycles across the image), over
//! which one to three discs, rectangles or triangles are painted with
//! 4×4 supersampled edges. Pixels are stored channel-major and quantized
//! to 8 bits.

use crate::numerics::rng::purpose;
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let d = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

fn random_shape(rng: &mut RngStream) -> Shape {
    let u = |rng: &mut RngStream, lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
    match rng.below(3) {
        0 => Shape::Disc {
            cx: u(rng, 0.15, 0.85),
            cy: u(rng, 0.15, 0.85),
            r: u(rng, 0.12, 0.3),
        },
        1 => {
            let (w, h) = (u(rng, 0.25, 0.6), u(rng, 0.25, 0.6));
            let (x0, y0) = (u(rng, 0.0, 1.0 - w), u(rng, 0.0, 1.0 - h));
            Shape::Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        }
        _ => {
            let (cx, cy) = (u(rng, 0.3, 0.7), u(rng, 0.3, 0.7));
            let r = u(rng, 0.2, 0.35);
            let a0 = u(rng, 0.0, std::f64::consts::TAU);
            let p = [0.0, 1.0, 2.0].map(|k| {
                let a = a0 + k * std::f64::consts::TAU / 3.0;
                (cx + r * a.cos(), cy + r * a.sin())
            });
            Shape::Triangle { p }
        }
    }
}

/// Generates image `index` as `channels × size × size` 8-bit levels.
pub fn generate_image(seed: u64, index: u64, channels: usize, size: usize) -> Vec<u8> {
    let mut rng = RngStream::new(seed, purpose::DATA_GEN).substream(index);
    let base: Vec<f64> = (0..channels).map(|_| 0.3 + 0.4 * rng.uniform()).collect();
    let waves: Vec<(f64, f64, f64, Vec<f64>)> = (0..3)
        .map(|_| {
            let fx = rng.uniform() * 2.0 - 1.0;
            let fy = rng.uniform() * 2.0 - 1.0;
            let phase = rng.uniform() * std::f64::consts::TAU;
            let amp = (0..channels).map(|_| 0.05 + 0.07 * rng.uniform()).collect();
            (2.0 * fx, 2.0 * fy, phase, amp)
        })
        .collect();
    let n_shapes = 1 + rng.below(3);
    let shapes: Vec<(Shape, Vec<f64>)> = (0..n_shapes)
        .map(|_| {
            let s = random_shape(&mut rng);
            let color = (0..channels).map(|_| 0.1 + 0.8 * rng.uniform()).collect();
            (s, color)
        })
        .collect();

    const SUB: usize = 4;
    let mut out = vec![0u8; channels * size * size];
    let mut acc = vec![0.0; channels];
    for i in 0..size {
        for j in 0..size {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for si in 0..SUB {
                for sj in 0..SUB {
                    let y = (i as f64 + (si as f64 + 0.5) / SUB as f64) / size as f64;
                    let x = (j as f64 + (sj as f64 + 0.5) / SUB as f64) / size as f64;
                    let top = shapes.iter().rev().find(|(s, _)| s.contains(x, y));
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += match top {
                            Some((_, color)) => color[c],
                            None => {
                                base[c]
                                    + waves
                                        .iter()
                                        .map(|(fx, fy, ph, amp)| {
                                            amp[c]
                                                * (std::f64::consts::TAU * (fx * x + fy * y) + ph)
                                                    .sin()
                                        })
                                        .sum::<f64>()
                            }
                        };
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                let v = a / (SUB * SUB) as f64;
                out[(c * size + i) * size + j] = (v * 256.0).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Images `start..start + count` of the corpus.
pub fn generate_corpus(
    seed: u64,
    start: u64,
    count: usize,
    channels: usize,
    size: usize,
) -> Vec<Vec<u8>> {
    (0..count as u64)
        .map(|k| generate_image(seed, start + k, channels, size))
        .collect()
}
