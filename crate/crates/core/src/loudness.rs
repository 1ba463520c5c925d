//! Integrated loudness (BS.1770-4) and loudness normalization.
//!
//! The K-weighting pre-filter is redesigned for the clip's sample rate from
//! the analog shelf and high-pass prototypes, so 44.1 kHz clips are measured
//! with the same response as the 48 kHz reference coefficients.

use std::f64::consts::PI;
use std::fmt;

use log::debug;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::audio::{apply_gain, AudioClip};

pub const DEFAULT_NOISE_TARGET_LUFS: f64 = -18.0;
pub const NORMALIZE_TOLERANCE_LU: f64 = 0.1;

const BLOCK_SECS: f64 = 0.4;
const STEP_SECS: f64 = 0.1;
const ABSOLUTE_GATE: f64 = -70.0;
const RELATIVE_GATE: f64 = -10.0;
const OFFSET: f64 = -0.691;

#[derive(Debug, Error)]
pub enum LoudnessError {
    #[error("clip of {len} samples is shorter than one 400 ms block ({needed} samples)")]
    TooShort { len: usize, needed: usize },
    #[error("loudness is immeasurable: every block falls below the absolute gate")]
    Immeasurable,
    #[error("target loudness must be finite, got {0}")]
    Target(f64),
}

/// An integrated loudness value, or the marker for clips gated out entirely.
///
/// Serializes as a JSON number, or as the string `"immeasurable"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lufs {
    Value(f64),
    Immeasurable,
}

impl Lufs {
    pub fn value(self) -> Option<f64> {
        match self {
            Lufs::Value(v) => Some(v),
            Lufs::Immeasurable => None,
        }
    }
}

impl fmt::Display for Lufs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lufs::Value(v) => write!(f, "{v:.2} LUFS"),
            Lufs::Immeasurable => f.write_str("immeasurable"),
        }
    }
}

impl Serialize for Lufs {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Lufs::Value(v) if v.is_finite() => s.serialize_f64(*v),
            _ => s.serialize_str("immeasurable"),
        }
    }
}

impl<'de> Deserialize<'de> for Lufs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Lufs::Value(v)),
            Raw::Text(t) if t == "immeasurable" => Ok(Lufs::Immeasurable),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected loudness string {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoudnessMeasurement {
    pub integrated_lufs: Lufs,
    pub gated_block_count: usize,
    pub ungated_block_count: usize,
}

/// Direct-form I biquad with `a0` normalized to one.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

fn k_weighting(rate: f64) -> [Biquad; 2] {
    // High shelf, +4 dB above ~1.7 kHz.
    let f0 = 1681.974450955533;
    let gain_db = 3.999843853973347;
    let q = 0.7071752369554196;
    let k = (PI * f0 / rate).tan();
    let vh = 10f64.powf(gain_db / 20.0);
    let vb = vh.powf(0.4996667741545416);
    let a0 = 1.0 + k / q + k * k;
    let shelf = Biquad {
        b: [
            (vh + vb * k / q + k * k) / a0,
            2.0 * (k * k - vh) / a0,
            (vh - vb * k / q + k * k) / a0,
        ],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };
    // Second-order high-pass near 38 Hz.
    let f0 = 38.13547087602444;
    let q = 0.5003270373238773;
    let k = (PI * f0 / rate).tan();
    let a0 = 1.0 + k / q + k * k;
    let highpass = Biquad {
        b: [1.0, -2.0, 1.0],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };
    [shelf, highpass]
}

fn block_loudness(mean_square: f64) -> f64 {
    OFFSET + 10.0 * mean_square.log10()
}

pub fn measure_lufs(clip: &AudioClip) -> Result<LoudnessMeasurement, LoudnessError> {
    let rate = clip.sample_rate() as f64;
    let block = (BLOCK_SECS * rate).round() as usize;
    let step = (STEP_SECS * rate).round() as usize;
    if clip.len() < block || block == 0 {
        return Err(LoudnessError::TooShort {
            len: clip.len(),
            needed: block,
        });
    }
    let [shelf, highpass] = k_weighting(rate);
    let weighted = highpass.run(&shelf.run(clip.samples()));

    let squares: Vec<f64> = weighted.iter().map(|y| y * y).collect();
    let n_blocks = (squares.len() - block) / step + 1;
    let powers: Vec<f64> = (0..n_blocks)
        .map(|j| squares[j * step..j * step + block].iter().sum::<f64>() / block as f64)
        .collect();

    let above_absolute: Vec<f64> = powers
        .iter()
        .copied()
        .filter(|&p| p > 0.0 && block_loudness(p) > ABSOLUTE_GATE)
        .collect();
    if above_absolute.is_empty() {
        return Ok(LoudnessMeasurement {
            integrated_lufs: Lufs::Immeasurable,
            gated_block_count: 0,
            ungated_block_count: n_blocks,
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let relative = block_loudness(mean(&above_absolute)) + RELATIVE_GATE;
    let gated: Vec<f64> = above_absolute
        .into_iter()
        .filter(|&p| block_loudness(p) > relative)
        .collect();
    let integrated = block_loudness(mean(&gated));
    debug!(
        "integrated loudness {integrated:.3} LUFS from {}/{n_blocks} blocks",
        gated.len()
    );
    Ok(LoudnessMeasurement {
        integrated_lufs: Lufs::Value(integrated),
        gated_block_count: gated.len(),
        ungated_block_count: n_blocks,
    })
}

/// Loudness of a clip as a number, or an error if it is gated out.
pub fn integrated_lufs(clip: &AudioClip) -> Result<f64, LoudnessError> {
    measure_lufs(clip)?
        .integrated_lufs
        .value()
        .ok_or(LoudnessError::Immeasurable)
}

/// A normalized clip and the total gain applied to reach it.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub clip: AudioClip,
    pub gain_db: f64,
    pub measured_before: f64,
    pub measured_after: f64,
}

/// Gains the clip to `target`; one corrective pass follows if the gating set
/// shifted enough to leave the result outside tolerance.
pub fn normalize_lufs(clip: &AudioClip, target: f64) -> Result<Normalized, LoudnessError> {
    if !target.is_finite() {
        return Err(LoudnessError::Target(target));
    }
    let before = integrated_lufs(clip)?;
    let mut gain_db = target - before;
    let mut out = apply_gain(clip, gain_db);
    let mut after = integrated_lufs(&out)?;
    if (after - target).abs() > NORMALIZE_TOLERANCE_LU {
        gain_db += target - after;
        out = apply_gain(clip, gain_db);
        after = integrated_lufs(&out)?;
    }
    Ok(Normalized {
        clip: out,
        gain_db,
        measured_before: before,
        measured_after: after,
    })
}
