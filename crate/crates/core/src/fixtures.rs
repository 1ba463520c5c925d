//! Deterministic synthetic noises for tests and demos.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    /// Decaying broadband clicks on a steady pulse.
    Clicks,
    /// Mains hum: 60 Hz and its harmonics up to 1 kHz.
    Hum,
    /// White noise, band-limited and amplitude-modulated at 4 Hz.
    AmNoise,
}

impl Fixture {
    pub const ALL: [Fixture; 3] = [Fixture::Clicks, Fixture::Hum, Fixture::AmNoise];

    pub fn name(self) -> &'static str {
        match self {
            Fixture::Clicks => "clicks",
            Fixture::Hum => "hum",
            Fixture::AmNoise => "am-noise",
        }
    }

    pub fn generate(self, len: usize, sample_rate: u32, seed: u64) -> AudioClip {
        let samples = match self {
            Fixture::Clicks => clicks(len, sample_rate, seed),
            Fixture::Hum => hum(len, sample_rate),
            Fixture::AmNoise => am_noise(len, sample_rate, seed),
        };
        AudioClip::new(samples, sample_rate).expect("fixture samples are finite")
    }
}

impl fmt::Display for Fixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fixture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Fixture::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown fixture `{s}`; expected clicks, hum or am-noise"))
    }
}

fn clicks(len: usize, rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = (0.25 * rate as f64) as usize;
    let decay = (-1.0 / (0.004 * rate as f64)).exp();
    let mut out = vec![0.0; len];
    let mut env = 0.0;
    for (i, s) in out.iter_mut().enumerate() {
        if i % period == 0 {
            env = 0.8;
        }
        *s = env * rng.gen_range(-1.0..1.0);
        env *= decay;
    }
    out
}

fn hum(len: usize, rate: u32) -> Vec<f64> {
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|k| (60.0 * k as f64, 0.3 / k as f64))
        .take_while(|&(f, _)| f <= 1000.0)
        .collect();
    (0..len)
        .map(|i| {
            let t = i as f64 / rate as f64;
            harmonics
                .iter()
                .map(|&(f, a)| a * (2.0 * PI * f * t).sin())
                .sum::<f64>()
                * 0.5
        })
        .collect()
}

fn am_noise(len: usize, rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One-pole low-pass around 3 kHz keeps the energy inside the mel range.
    let a = (-2.0 * PI * 3000.0 / rate as f64).exp();
    let mut y = 0.0;
    (0..len)
        .map(|i| {
            let t = i as f64 / rate as f64;
            y = (1.0 - a) * rng.gen_range(-1.0..1.0) + a * y;
            let env = 0.55 + 0.45 * (2.0 * PI * 4.0 * t).sin();
            0.8 * env * y
        })
        .collect()
}
