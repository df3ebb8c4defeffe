//! A self-contained digit corpus: seven-segment glyphs rendered as
//! MNIST-shaped 28x28 grayscale images.
//!
//! The colored-digits experiment needs digit images whose shape carries
//! the label, but this environment has no dataset files, so the corpus is
//! synthesized. Seven-segment digits keep the essential property (classes
//! 0..4 vs 5..9 are distinguishable from strokes alone) while per-image
//! jitter, intensity scaling, and pixel noise stop the task from being
//! solvable by a single pixel. Real MNIST in IDX files drops in through
//! the same [`crate::experiments::idx`] types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::idx::IdxTensor;

pub const IMAGE_SIDE: usize = 28;

/// Lit segments per digit, bits 0..=6 for A, B, C, D, E, F, G.
/// A top, B top-right, C bottom-right, D bottom, E bottom-left,
/// F top-left, G middle bar.
const SEGMENTS: [u8; 10] = [
    0b011_1111, // 0: ABCDEF
    0b000_0110, // 1: BC
    0b101_1011, // 2: ABGED
    0b100_1111, // 3: ABGCD
    0b110_0110, // 4: FGBC
    0b110_1101, // 5: AFGCD
    0b111_1101, // 6: AFGEDC
    0b000_0111, // 7: ABC
    0b111_1111, // 8: all
    0b110_1111, // 9: ABCDFG
];

fn lit(digit: u8, segment: usize) -> bool {
    SEGMENTS[digit as usize] >> segment & 1 == 1
}

/// Render one digit as a 28x28 image with values in [0, 1].
///
/// The glyph sits in a fixed box (rows 5..23, cols 9..19, stroke
/// thickness 3) and is then shifted by up to one pixel in each axis,
/// dimmed by a random factor in [0.85, 1], and dusted with Gaussian
/// pixel noise of standard deviation 0.02.
pub fn render_digit(digit: u8, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(digit < 10, "digit out of range");
    let (r0, r1, c0, c1, t) = (5usize, 23usize, 9usize, 19usize, 3usize);
    let rm = (r0 + r1) / 2;
    let mut img = vec![0.0f64; IMAGE_SIDE * IMAGE_SIDE];
    let mut fill = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        for r in rows {
            for c in cols.clone() {
                img[r * IMAGE_SIDE + c] = 1.0;
            }
        }
    };
    if lit(digit, 0) {
        fill(r0..r0 + t, c0..c1); // A
    }
    if lit(digit, 3) {
        fill(r1 - t..r1, c0..c1); // D
    }
    if lit(digit, 6) {
        fill(rm - 1..rm + 2, c0..c1); // G
    }
    if lit(digit, 5) {
        fill(r0..rm, c0..c0 + t); // F
    }
    if lit(digit, 1) {
        fill(r0..rm, c1 - t..c1); // B
    }
    if lit(digit, 4) {
        fill(rm..r1, c0..c0 + t); // E
    }
    if lit(digit, 2) {
        fill(rm..r1, c1 - t..c1); // C
    }

    let dx = rng.random_range(-1i64..=1);
    let dy = rng.random_range(-1i64..=1);
    let rolled = roll(&img, dy, dx);
    let scale = rng.random_range(0.85..1.0);
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    rolled
        .into_iter()
        .map(|v| {
            let n: f64 = noise.sample(rng);
            (v * scale + n).clamp(0.0, 1.0)
        })
        .collect()
}

/// Circular shift of a square image by `dy` rows and `dx` columns.
fn roll(img: &[f64], dy: i64, dx: i64) -> Vec<f64> {
    let s = IMAGE_SIDE as i64;
    let mut out = vec![0.0; img.len()];
    for r in 0..s {
        for c in 0..s {
            let src_r = (r - dy).rem_euclid(s) as usize;
            let src_c = (c - dx).rem_euclid(s) as usize;
            out[(r * s + c) as usize] = img[src_r * IMAGE_SIDE + src_c];
        }
    }
    out
}

/// Synthesize a corpus of `n` random digits as IDX image and label
/// tensors, the same shapes a real digit corpus would load to.
pub fn synth_corpus(n: usize, seed: u64) -> (IdxTensor, IdxTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.random_range(0u8..10);
        labels.push(digit);
        let img = render_digit(digit, &mut rng);
        images.extend(img.iter().map(|&v| (v * 255.0).round() as u8));
    }
    let images = IdxTensor::images(n, IMAGE_SIDE, IMAGE_SIDE, images).expect("sized by loop");
    (images, IdxTensor::labels(labels))
}
