//! Deterministic weights-free generator used for tests and offline runs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{GenError, GeneratorBackend, GeneratorRequest, GeneratorResponse};
use crate::specimage::{SpecImage, SILENT_PIXEL};
use crate::spectral::hz_to_mel;

const PENTATONIC_HZ: [f64; 5] = [110.0, 123.47, 138.59, 164.81, 185.0];
const PARTIALS: usize = 4;

/// Stub generator over an image whose rows span `f_min..f_max` on the mel
/// scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubBackend {
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for StubBackend {
    fn default() -> Self {
        Self {
            f_min: 0.0,
            f_max: 10_000.0,
        }
    }
}

impl GeneratorBackend for StubBackend {
    fn id(&self) -> String {
        "stub".into()
    }

    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GenError> {
        req.validate()?;
        Ok(stub_generate(req, self.f_min, self.f_max))
    }
}

fn rng_for(prompt: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Mel band whose filter is centred nearest to `hz`.
fn band_for(hz: f64, bands: usize, f_min: f64, f_max: f64) -> Option<usize> {
    if hz < f_min || hz > f_max || bands == 0 {
        return None;
    }
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let spacing = (hi - lo) / (bands + 1) as f64;
    let b = ((hz_to_mel(hz) - lo) / spacing - 1.0).round();
    Some(b.clamp(0.0, (bands - 1) as f64) as usize)
}

/// Frames where generated stacks start: above-median kept energy, or a
/// seeded beat grid when the envelope is flat.
fn onset_frames(req: &GeneratorRequest, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let pixels = req.image.pixels();
    let (bands, frames) = pixels.dim();
    let envelope: Vec<f64> = (0..frames)
        .map(|t| {
            (0..bands)
                .filter(|&m| req.keep.0[[m, t]])
                .map(|m| (255 - pixels[[m, t]]) as f64 / 255.0)
                .sum()
        })
        .collect();
    let mut sorted = envelope.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if frames == 0 {
        0.0
    } else if frames % 2 == 1 {
        sorted[frames / 2]
    } else {
        0.5 * (sorted[frames / 2 - 1] + sorted[frames / 2])
    };
    let onsets: Vec<bool> = envelope.iter().map(|&e| e > median).collect();
    if onsets.iter().any(|&o| o) {
        return onsets;
    }
    let period = rng.gen_range(8..=23);
    let offset = rng.gen_range(0..period);
    (0..frames).map(|t| t >= offset && (t - offset) % period < 2).collect()
}

/// Fills every non-kept cell with harmonic stacks aligned to the kept
/// region's energy onsets; kept cells pass through.
pub fn stub_generate(req: &GeneratorRequest, f_min: f64, f_max: f64) -> GeneratorResponse {
    let mut rng = rng_for(&req.prompt, req.seed);
    let src = req.image.pixels();
    let (bands, frames) = src.dim();
    let onsets = onset_frames(req, &mut rng);

    let mut texture = Array2::from_elem((bands, frames), SILENT_PIXEL);
    let mut t = 0;
    while t < frames {
        if !onsets[t] {
            t += 1;
            continue;
        }
        let f0 = PENTATONIC_HZ[rng.gen_range(0..PENTATONIC_HZ.len())];
        while t < frames && onsets[t] {
            for k in 1..=PARTIALS {
                let Some(row) = band_for(f0 * k as f64, bands, f_min, f_max) else {
                    continue;
                };
                let level = 32 + 24 * (k as u8 - 1);
                for r in row.saturating_sub(1)..=(row + 1).min(bands - 1) {
                    let cell = &mut texture[[r, t]];
                    *cell = (*cell).min(level);
                }
            }
            t += 1;
        }
    }

    let pixels = Array2::from_shape_fn((bands, frames), |(m, t)| {
        if req.keep.0[[m, t]] {
            src[[m, t]]
        } else {
            texture[[m, t]]
        }
    });
    GeneratorResponse {
        image: SpecImage::new(pixels, req.image.mapping()),
    }
}
