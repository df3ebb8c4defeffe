//! Colored digits: a binary digit task with a spurious color channel.
//!
//! Construction, given a corpus of grayscale digit images:
//!
//! 1. binary label y = −1 for digits 0..4, +1 for 5..9;
//! 2. flip the label with probability 0.25 (label noise, so no feature
//!    can be perfect);
//! 3. pick a color bit equal to the noisy label, flipped with probability
//!    `color_flip` (low for training, high for test, so color is a strong
//!    but reversed cue at test time);
//! 4. pool the 28x28 image to 14x14 by 2x2 means and write it into the
//!    channel named by the color bit, zeroing the other channel.
//!
//! The flattened input is 2 channels x 14 x 14 = 392 values. Because the
//! label noise caps shape accuracy at 75% while color tracks the noisy
//! label at 1 − color_flip, an unregularized learner prefers color and
//! collapses when the test split reverses it.
//!
//! Four test-time variants isolate what a trained model actually reads:
//! both channels averaged (shape only), untouched (shape and color), all
//! zeros (nothing), or the digit erased but its channel placement kept
//! (color only).

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::idx::IdxTensor;
use super::train::{accuracy, mean_entropy};
use crate::model::Network;
use crate::{Error, Result};

/// Side of the pooled image.
pub const POOLED_SIDE: usize = 14;
/// Pixels per channel after pooling.
pub const CHANNEL_PIXELS: usize = POOLED_SIDE * POOLED_SIDE;
/// Flattened input width: two channels.
pub const INPUT_DIM: usize = 2 * CHANNEL_PIXELS;
/// Label flip probability. Fixed by the construction, not a knob: it is
/// what makes the shape feature imperfect.
pub const LABEL_NOISE: f64 = 0.25;

/// A colored split: flattened inputs, signed labels, and the generating
/// color bit and digit per example (kept for group-wise evaluation).
#[derive(Debug, Clone)]
pub struct ColoredDataset {
    /// n x 392, row layout: channel 0 pixels then channel 1 pixels.
    pub x: Array2<f64>,
    /// Noisy binary labels, ±1.
    pub y: Array1<f64>,
    /// Channel holding the digit for each example.
    pub color: Vec<u8>,
    /// Source digit, 0..=9.
    pub digit: Vec<u8>,
}

impl ColoredDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Pool a 28x28 u8 image to 14x14 means in [0, 1].
fn pool(image: &[u8], side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; half * half];
    for r in 0..half {
        for c in 0..half {
            let mut s = 0.0;
            for dr in 0..2 {
                for dc in 0..2 {
                    s += image[(2 * r + dr) * side + (2 * c + dc)] as f64 / 255.0;
                }
            }
            out[r * half + c] = s / 4.0;
        }
    }
    out
}

/// Build a colored split from a digit corpus. Labels and colors are
/// drawn from `seed`; the corpus supplies the images in order.
pub fn build_colored(
    images: &IdxTensor,
    labels: &IdxTensor,
    color_flip: f64,
    seed: u64,
) -> Result<ColoredDataset> {
    if images.dims().len() != 3 {
        return Err(Error::Format("images must be a 3-d IDX tensor".into()));
    }
    let side = images.dims()[1];
    if side != 28 || images.dims()[2] != 28 {
        return Err(Error::Format(format!(
            "expected 28x28 images, got {}x{}",
            side,
            images.dims()[2]
        )));
    }
    if images.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&color_flip) {
        return Err(Error::Config(format!(
            "color_flip = {color_flip} outside [0, 1]"
        )));
    }
    let n = images.len();
    if n == 0 {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, INPUT_DIM));
    let mut y = Array1::zeros(n);
    let mut color = Vec::with_capacity(n);
    let mut digit = Vec::with_capacity(n);
    for i in 0..n {
        let d = labels.data()[i];
        if d > 9 {
            return Err(Error::Format(format!("label {d} is not a digit")));
        }
        let mut yi = if d < 5 { -1.0 } else { 1.0 };
        if rng.random::<f64>() < LABEL_NOISE {
            yi = -yi;
        }
        let mut bit = u8::from(yi > 0.0);
        if rng.random::<f64>() < color_flip {
            bit = 1 - bit;
        }
        let pooled = pool(images.image(i), side);
        let offset = bit as usize * CHANNEL_PIXELS;
        for (p, &v) in pooled.iter().enumerate() {
            x[[i, offset + p]] = v;
        }
        y[i] = yi;
        color.push(bit);
        digit.push(d);
    }
    Ok(ColoredDataset { x, y, color, digit })
}

/// Test-time input transforms. Each is idempotent: applying one twice
/// gives the same inputs as applying it once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Environment {
    /// Average the channels into both: shape survives, color is erased.
    GrayscaleDigit,
    /// Leave inputs untouched: shape and color both present.
    ColoredDigit,
    /// Zero everything: no information at all.
    GrayscaleBlank,
    /// Erase the digit but keep its channel placement: the stroke mass
    /// is spread into a uniform plate in the colored channel, so color
    /// is the only signal left.
    ColoredBlank,
}

impl Environment {
    pub const ALL: [Environment; 4] = [
        Environment::GrayscaleDigit,
        Environment::ColoredDigit,
        Environment::GrayscaleBlank,
        Environment::ColoredBlank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Environment::GrayscaleDigit => "grayscale-digit",
            Environment::ColoredDigit => "colored-digit",
            Environment::GrayscaleBlank => "grayscale-blank",
            Environment::ColoredBlank => "colored-blank",
        }
    }
}

impl std::str::FromStr for Environment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Environment> {
        Environment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment '{s}'")))
    }
}

/// Apply a test-time transform, leaving labels and bookkeeping intact.
pub fn make_environment(data: &ColoredDataset, env: Environment) -> ColoredDataset {
    let mut out = data.clone();
    let n = data.n();
    match env {
        Environment::ColoredDigit => {}
        Environment::GrayscaleBlank => out.x.fill(0.0),
        Environment::GrayscaleDigit => {
            for i in 0..n {
                for p in 0..CHANNEL_PIXELS {
                    let m = 0.5 * (out.x[[i, p]] + out.x[[i, CHANNEL_PIXELS + p]]);
                    out.x[[i, p]] = m;
                    out.x[[i, CHANNEL_PIXELS + p]] = m;
                }
            }
        }
        Environment::ColoredBlank => {
            for i in 0..n {
                let offset = data.color[i] as usize * CHANNEL_PIXELS;
                let other = CHANNEL_PIXELS - offset;
                let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
                for p in 0..CHANNEL_PIXELS {
                    let v = out.x[[i, offset + p]];
                    lo = lo.min(v);
                    hi = hi.max(v);
                    sum += v;
                }
                // A constant channel is its own mean; taking it directly
                // keeps the transform idempotent to the bit, where the
                // summed mean could drift by an ulp on reapplication.
                let m = if lo == hi {
                    lo
                } else {
                    sum / CHANNEL_PIXELS as f64
                };
                for p in 0..CHANNEL_PIXELS {
                    out.x[[i, offset + p]] = m;
                    out.x[[i, other + p]] = 0.0;
                }
            }
        }
    }
    out
}

/// Accuracy and mean prediction entropy of a model on one split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EnvReport {
    pub accuracy: f64,
    /// Mean binary entropy of sigmoid(logit) in nats; low entropy means
    /// the model is confident, whether or not it is right.
    pub entropy: f64,
}

pub fn evaluate(net: &Network, data: &ColoredDataset) -> Result<EnvReport> {
    let y_hat = net.forward(&data.x)?;
    Ok(EnvReport {
        accuracy: accuracy(&y_hat, &data.y),
        entropy: mean_entropy(&y_hat),
    })
}

/// Smallest per-group accuracy over the four (label, color) groups.
/// Groups where color disagrees with the label are the minority at train
/// time; a color-bound model scores near zero on them after the flip.
pub fn worst_group_accuracy(net: &Network, data: &ColoredDataset) -> Result<f64> {
    let y_hat = net.forward(&data.x)?;
    let mut worst = f64::INFINITY;
    for label in [-1.0, 1.0] {
        for bit in [0u8, 1u8] {
            let (mut hits, mut total) = (0usize, 0usize);
            for i in 0..data.n() {
                if data.y[i] == label && data.color[i] == bit {
                    total += 1;
                    if y_hat[i] * label > 0.0 {
                        hits += 1;
                    }
                }
            }
            if total > 0 {
                worst = worst.min(hits as f64 / total as f64);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::digits::synth_corpus;

    #[test]
    fn label_noise_lands_within_a_point_of_its_rate_at_scale() {
        let (images, labels) = synth_corpus(50_000, 21);
        let data = build_colored(&images, &labels, 0.1, 22).unwrap();
        let mut flipped = 0usize;
        for i in 0..data.n() {
            let clean = if data.digit[i] < 5 { -1.0 } else { 1.0 };
            if data.y[i] != clean {
                flipped += 1;
            }
        }
        let rate = flipped as f64 / data.n() as f64;
        assert!(
            (rate - LABEL_NOISE).abs() < 0.01,
            "flip rate {rate} too far from {LABEL_NOISE}"
        );
    }

    #[test]
    fn color_tracks_the_noisy_label_at_the_requested_rate() {
        let (images, labels) = synth_corpus(50_000, 31);
        for flip in [0.1, 0.9] {
            let data = build_colored(&images, &labels, flip, 32).unwrap();
            let mut agree = 0usize;
            for i in 0..data.n() {
                if (data.color[i] == 1) == (data.y[i] > 0.0) {
                    agree += 1;
                }
            }
            let rate = 1.0 - agree as f64 / data.n() as f64;
            assert!((rate - flip).abs() < 0.01, "flip {flip} measured {rate}");
        }
    }

    #[test]
    fn digit_occupies_exactly_the_color_channel() {
        let (images, labels) = synth_corpus(200, 41);
        let data = build_colored(&images, &labels, 0.1, 42).unwrap();
        for i in 0..data.n() {
            let on = data.color[i] as usize * CHANNEL_PIXELS;
            let off = CHANNEL_PIXELS - on;
            let mass: f64 = (0..CHANNEL_PIXELS).map(|p| data.x[[i, on + p]]).sum();
            let zero: f64 = (0..CHANNEL_PIXELS).map(|p| data.x[[i, off + p]]).sum();
            assert!(mass > 1.0, "digit channel nearly empty at row {i}");
            assert_eq!(zero, 0.0, "off channel not zeroed at row {i}");
        }
    }

    #[test]
    fn pooling_averages_two_by_two_blocks() {
        let mut img = vec![0u8; 28 * 28];
        img[0] = 255;
        img[1] = 255;
        img[28] = 255;
        img[29] = 255; // one full block
        img[2] = 255; // quarter of the next block
        let pooled = pool(&img, 28);
        assert!((pooled[0] - 1.0).abs() < 1e-12);
        assert!((pooled[1] - 0.25).abs() < 1e-12);
        assert_eq!(pooled[2], 0.0);
    }

    #[test]
    fn environments_are_idempotent() {
        let (images, labels) = synth_corpus(60, 51);
        let data = build_colored(&images, &labels, 0.2, 52).unwrap();
        for env in Environment::ALL {
            let once = make_environment(&data, env);
            let twice = make_environment(&once, env);
            assert_eq!(once.x, twice.x, "{} not idempotent", env.name());
        }
    }

    #[test]
    fn environments_keep_or_erase_the_right_signals() {
        let (images, labels) = synth_corpus(40, 61);
        let data = build_colored(&images, &labels, 0.2, 62).unwrap();
        let gray = make_environment(&data, Environment::GrayscaleDigit);
        let blank = make_environment(&data, Environment::GrayscaleBlank);
        let plate = make_environment(&data, Environment::ColoredBlank);
        for i in 0..data.n() {
            let on = data.color[i] as usize * CHANNEL_PIXELS;
            let off = CHANNEL_PIXELS - on;
            for p in 0..CHANNEL_PIXELS {
                // Grayscale: both channels equal, shape preserved at half
                // intensity.
                assert_eq!(gray.x[[i, p]], gray.x[[i, CHANNEL_PIXELS + p]]);
                assert_eq!(gray.x[[i, on + p]], 0.5 * data.x[[i, on + p]]);
                assert_eq!(blank.x[[i, p]], 0.0);
                // Plate: constant in the colored channel, zero elsewhere.
                assert_eq!(plate.x[[i, on + p]], plate.x[[i, on]]);
                assert_eq!(plate.x[[i, off + p]], 0.0);
            }
            // The plate keeps the channel's mean intensity.
            let mean: f64 =
                (0..CHANNEL_PIXELS).map(|p| data.x[[i, on + p]]).sum::<f64>() / CHANNEL_PIXELS as f64;
            assert!((plate.x[[i, on]] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_rebuilds_identically() {
        let (images, labels) = synth_corpus(80, 71);
        let a = build_colored(&images, &labels, 0.1, 72).unwrap();
        let b = build_colored(&images, &labels, 0.1, 72).unwrap();
        let c = build_colored(&images, &labels, 0.1, 73).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_ne!(a.color, c.color);
    }

    #[test]
    fn rejects_malformed_corpora() {
        let (images, labels) = synth_corpus(10, 81);
        assert!(build_colored(&images, &labels, 1.5, 0).is_err());
        let short = IdxTensor::labels(vec![1, 2, 3]);
        assert!(build_colored(&images, &short, 0.1, 0).is_err());
        let bad = IdxTensor::labels(vec![11; 10]);
        assert!(build_colored(&images, &bad, 0.1, 0).is_err());
        let flat = IdxTensor::labels(vec![0; 10]);
        assert!(build_colored(&flat, &labels, 0.1, 0).is_err());
    }
}
