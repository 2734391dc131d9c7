use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

pub const SYNTHETIC_SIZE: usize = 32;

// Segments a..g of a seven-segment display, per digit.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

struct Glyph {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    thickness: f64,
    slant: f64,
    ink: f64,
}

impl Glyph {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Glyph {
            left: rng.random_range(7.0..12.0),
            top: rng.random_range(4.0..8.0),
            width: rng.random_range(9.0..14.0),
            height: rng.random_range(18.0..23.0),
            thickness: rng.random_range(1.8..3.2),
            slant: rng.random_range(-0.2..0.2),
            ink: rng.random_range(0.75..1.0),
        }
    }

    /// Segment end points in glyph coordinates (x right, y down).
    fn segment(&self, s: usize) -> ((f64, f64), (f64, f64)) {
        let (l, r) = (0.0, self.width);
        let (t, m, b) = (0.0, self.height / 2.0, self.height);
        match s {
            0 => ((l, t), (r, t)),
            1 => ((r, t), (r, m)),
            2 => ((r, m), (r, b)),
            3 => ((l, b), (r, b)),
            4 => ((l, m), (l, b)),
            5 => ((l, t), (l, m)),
            _ => ((l, m), (r, m)),
        }
    }

    /// Coverage of pixel centre `(x, y)` by the digit's strokes, with a
    /// one-pixel soft edge.
    fn coverage(&self, digit: usize, x: f64, y: f64) -> f64 {
        let gy = y - self.top;
        let gx = x - self.left - self.slant * (self.height / 2.0 - gy);
        let mut best = f64::INFINITY;
        for s in (0..7).filter(|&s| SEGMENTS[digit][s]) {
            let ((x0, y0), (x1, y1)) = self.segment(s);
            let (dx, dy) = (x1 - x0, y1 - y0);
            let t = (((gx - x0) * dx + (gy - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let d = ((gx - x0 - t * dx).powi(2) + (gy - y0 - t * dy).powi(2)).sqrt();
            best = best.min(d);
        }
        (self.thickness / 2.0 + 0.5 - best).clamp(0.0, 1.0)
    }
}

fn draw(digit: usize, rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let g = Glyph::random(rng);
    let n = SYNTHETIC_SIZE;
    (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
            let v = g.ink * g.coverage(digit, x, y) + noise * rng.random_range(-1.0..1.0);
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// `n` seven-segment style digit glyphs, 32×32, label `i % 10`, with
/// seeded jitter in position, size, stroke width, slant and ink.
pub fn synthetic_digits(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::contract("synthetic_digits needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * SYNTHETIC_SIZE * SYNTHETIC_SIZE);
    for i in 0..n {
        data.extend(draw(i % 10, &mut rng, 0.0));
    }
    let labels = (0..n).map(|i| i % 10).collect();
    Dataset::new(Tensor::new(vec![n, SYNTHETIC_SIZE, SYNTHETIC_SIZE, 1], data)?, labels, 10, Split::Full)
}

/// Binary task over noisy glyphs: label 1 when the drawn digit is odd.
/// Digits are drawn uniformly at random and pixels carry uniform noise of
/// amplitude 0.25.
pub fn synthetic_binary(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::contract("synthetic_binary needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * SYNTHETIC_SIZE * SYNTHETIC_SIZE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.random_range(0..10);
        data.extend(draw(digit, &mut rng, 0.25));
        labels.push(digit % 2);
    }
    Dataset::new(Tensor::new(vec![n, SYNTHETIC_SIZE, SYNTHETIC_SIZE, 1], data)?, labels, 2, Split::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_seeded_labelled_and_in_range() {
        let a = synthetic_digits(10, 4).unwrap();
        assert_eq!(a, synthetic_digits(10, 4).unwrap());
        assert_ne!(a, synthetic_digits(10, 5).unwrap());
        assert_eq!(a.labels(), &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Every glyph has some ink.
        for i in 0..10 {
            assert!(a.image(i).sum() > 20.0);
        }
    }

    #[test]
    fn binary_labels_are_parity() {
        let b = synthetic_binary(64, 1).unwrap();
        assert_eq!(b.classes(), 2);
        let ones = b.labels().iter().filter(|&&l| l == 1).count();
        assert!(ones > 16 && ones < 48);
    }
}
