//! Time-frequency transforms: centered Hann STFT, HTK mel filterbank with an
//! approximate inverse, dB conversions and fast Griffin-Lim reconstruction.
//!
//! Grids are stored with rows = frequency (STFT bins or mel bands, lowest
//! first) and columns = time frames.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

/// Amplitudes below this are clamped before taking logarithms (-100 dB).
pub const AMP_FLOOR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid spectral config: {0}")]
    InvalidConfig(String),
    #[error("clip sample rate {found} Hz does not match config {expected} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("clip has {found} samples, expected canonical length {expected}")]
    Length { expected: usize, found: usize },
    #[error("expected a {expected:?} grid of {rows}x{cols}, got {found:?} {found_rows}x{found_cols}")]
    Shape {
        expected: GridAxis,
        rows: usize,
        cols: usize,
        found: GridAxis,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("grid contains a negative or non-finite value")]
    InvalidValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
}

/// Shared parameters for every transform in one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub window: WindowKind,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_frames: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44100,
            n_fft: 2048,
            hop_length: 441,
            window: WindowKind::Hann,
            n_mels: 512,
            f_min: 0.0,
            f_max: 10_000.0,
            n_frames: 512,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<(), SpectralError> {
        let bad = |m: &str| Err(SpectralError::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.n_fft < 2 || !self.n_fft.is_power_of_two() {
            return bad("n_fft must be a power of two >= 2");
        }
        if self.hop_length == 0 || self.hop_length > self.n_fft {
            return bad("hop_length must be in 1..=n_fft");
        }
        if self.n_mels == 0 || self.n_frames == 0 {
            return bad("n_mels and n_frames must be >= 1");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return bad("need 0 <= f_min < f_max");
        }
        if self.f_max > self.sample_rate as f64 / 2.0 {
            return bad("f_max must not exceed the Nyquist frequency");
        }
        Ok(())
    }

    /// Number of STFT frequency bins, `n_fft / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Samples in a canonical clip: `n_frames * hop_length`.
    pub fn canonical_len(&self) -> usize {
        self.n_frames * self.hop_length
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.n_fft as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridAxis {
    StftBins,
    MelBands,
}

/// Nonnegative magnitude grid, rows = frequency, columns = frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramGrid {
    values: Array2<f64>,
    axis: GridAxis,
}

impl SpectrogramGrid {
    pub fn new(values: Array2<f64>, axis: GridAxis) -> Result<Self, SpectralError> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SpectralError::InvalidValue);
        }
        Ok(Self { values, axis })
    }

    pub fn zeros(axis: GridAxis, rows: usize, cols: usize) -> Self {
        Self {
            values: Array2::zeros((rows, cols)),
            axis,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn axis(&self) -> GridAxis {
        self.axis
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Multiplies every cell by a nonnegative scalar.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.mapv(|v| v * factor),
            axis: self.axis,
        }
    }

    fn expect(&self, axis: GridAxis, rows: usize, cols: usize) -> Result<(), SpectralError> {
        if self.axis != axis || self.rows() != rows || self.cols() != cols {
            return Err(SpectralError::Shape {
                expected: axis,
                rows,
                cols,
                found: self.axis,
                found_rows: self.rows(),
                found_cols: self.cols(),
            });
        }
        Ok(())
    }
}

pub fn amp_to_db(x: f64) -> f64 {
    20.0 * x.max(AMP_FLOOR).log10()
}

pub fn db_to_amp(d: f64) -> f64 {
    10f64.powf(d / 20.0)
}

/// The dB value of [`AMP_FLOOR`].
pub fn floor_db() -> f64 {
    amp_to_db(AMP_FLOOR)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// One triangular filter stored sparsely over its nonzero bins.
#[derive(Debug, Clone)]
struct MelBand {
    start: usize,
    weights: Vec<f64>,
}

/// HTK-scale triangular filterbank with area normalization (each triangle is
/// scaled by `2 / (f_hi - f_lo)`).
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    bands: Vec<MelBand>,
    n_bins: usize,
    /// Sum of each band's weights.
    band_sums: Vec<f64>,
    /// Area normalization factor per band, used to recover unit-peak shapes.
    enorm: Vec<f64>,
    /// Per-bin sum of unit-peak triangle heights, for the inverse.
    bin_cover: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &SpectralConfig) -> Self {
        let n_bins = cfg.n_bins();
        let mel_lo = hz_to_mel(cfg.f_min);
        let mel_hi = hz_to_mel(cfg.f_max);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut bands = Vec::with_capacity(cfg.n_mels);
        let mut enorm = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            let mut start = None;
            let mut weights = Vec::new();
            for bin in 0..n_bins {
                let f = cfg.bin_frequency(bin);
                let rising = (f - lo) / (center - lo);
                let falling = (hi - f) / (hi - center);
                let w = rising.min(falling).max(0.0);
                if w > 0.0 {
                    start.get_or_insert(bin);
                    // Triangles are convex so nonzero bins are contiguous.
                    weights.push(w * norm);
                } else if start.is_some() {
                    break;
                }
            }
            bands.push(MelBand {
                start: start.unwrap_or(0),
                weights,
            });
            enorm.push(norm);
        }
        let band_sums = bands.iter().map(|b| b.weights.iter().sum()).collect();
        let mut bin_cover = vec![0.0; n_bins];
        for (band, norm) in bands.iter().zip(&enorm) {
            for (i, w) in band.weights.iter().enumerate() {
                bin_cover[band.start + i] += w / norm;
            }
        }
        Self {
            bands,
            n_bins,
            band_sums,
            enorm,
            bin_cover,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.bands.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Filter weight of `band` at STFT `bin`.
    pub fn weight(&self, band: usize, bin: usize) -> f64 {
        let b = &self.bands[band];
        bin.checked_sub(b.start)
            .and_then(|i| b.weights.get(i))
            .copied()
            .unwrap_or(0.0)
    }

    /// Dense `n_mels x n_bins` matrix of filter weights.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_mels(), self.n_bins));
        for (r, band) in self.bands.iter().enumerate() {
            for (i, &w) in band.weights.iter().enumerate() {
                m[[r, band.start + i]] = w;
            }
        }
        m
    }

    /// Bins with at least one filter covering them.
    pub fn is_bin_covered(&self, bin: usize) -> bool {
        self.bin_cover[bin] > 0.0
    }

    /// Number of STFT bins under `band`'s triangle.
    pub fn band_support(&self, band: usize) -> usize {
        self.bands[band].weights.len()
    }

    fn apply(&self, stft: &Array2<f64>) -> Array2<f64> {
        let cols = stft.ncols();
        let mut out = Array2::zeros((self.n_mels(), cols));
        for (m, band) in self.bands.iter().enumerate() {
            for t in 0..cols {
                let mut acc = 0.0;
                for (i, &w) in band.weights.iter().enumerate() {
                    acc += w * stft[[band.start + i, t]];
                }
                out[[m, t]] = acc;
            }
        }
        out
    }

    /// Each band value is first turned into that band's weighted mean per-bin
    /// magnitude, then spread back over its bins with the unit-peak triangle
    /// and normalized by the total triangle height at each bin.
    fn invert(&self, mel: &Array2<f64>) -> Array2<f64> {
        let cols = mel.ncols();
        let mut out = Array2::zeros((self.n_bins, cols));
        for (m, band) in self.bands.iter().enumerate() {
            let sum = self.band_sums[m];
            if sum <= 0.0 {
                continue;
            }
            let norm = self.enorm[m];
            for t in 0..cols {
                let level = mel[[m, t]] / sum;
                for (i, &w) in band.weights.iter().enumerate() {
                    out[[band.start + i, t]] += (w / norm) * level;
                }
            }
        }
        for (bin, &cover) in self.bin_cover.iter().enumerate() {
            if cover > 0.0 {
                out.row_mut(bin).mapv_inplace(|v: f64| (v / cover).max(0.0));
            }
        }
        out
    }
}

/// Reusable transform state: window, FFT plans and filterbank for one config.
pub struct Spectral {
    cfg: SpectralConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("cfg", &self.cfg).finish()
    }
}

impl Spectral {
    pub fn new(cfg: &SpectralConfig) -> Result<Self, SpectralError> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            window: hann(cfg.n_fft),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
            filterbank: MelFilterbank::new(cfg),
        })
    }

    pub fn config(&self) -> &SpectralConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    fn check_clip(&self, clip: &AudioClip) -> Result<(), SpectralError> {
        if clip.sample_rate() != self.cfg.sample_rate {
            return Err(SpectralError::SampleRate {
                expected: self.cfg.sample_rate,
                found: clip.sample_rate(),
            });
        }
        if clip.len() != self.cfg.canonical_len() {
            return Err(SpectralError::Length {
                expected: self.cfg.canonical_len(),
                found: clip.len(),
            });
        }
        Ok(())
    }

    /// Complex STFT of a canonical-length signal: `n_bins x n_frames`.
    pub fn stft_complex(&self, samples: &[f64]) -> Array2<Complex64> {
        let n_fft = self.cfg.n_fft;
        let pad = n_fft / 2;
        let hop = self.cfg.hop_length;
        let n_bins = self.cfg.n_bins();
        let frames = self.cfg.n_frames;
        let mut out = Array2::zeros((n_bins, frames));
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = reflect_index(t as isize * hop as isize + i as isize - pad as isize, samples.len());
                *slot = Complex64::new(samples[idx] * self.window[i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                out[[k, t]] = buf[k];
            }
        }
        out
    }

    /// Windowed overlap-add inverse of [`Spectral::stft_complex`], returning
    /// a canonical-length signal.
    pub fn istft(&self, spec: &Array2<Complex64>) -> Vec<f64> {
        let n_fft = self.cfg.n_fft;
        let pad = n_fft / 2;
        let hop = self.cfg.hop_length;
        let n_bins = self.cfg.n_bins();
        let frames = spec.ncols();
        let len = self.cfg.canonical_len();
        let padded_len = (frames - 1) * hop + n_fft;
        let mut acc = vec![0.0; padded_len];
        let mut wss = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / n_fft as f64;
        for t in 0..frames {
            for k in 0..n_bins {
                buf[k] = spec[[k, t]];
            }
            // DC and Nyquist must be real for a real signal.
            buf[0].im = 0.0;
            buf[n_fft / 2].im = 0.0;
            for k in 1..n_fft / 2 {
                buf[n_fft - k] = buf[k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let offset = t * hop;
            for i in 0..n_fft {
                let w = self.window[i];
                acc[offset + i] += buf[i].re * scale * w;
                wss[offset + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + pad;
                match (acc.get(j), wss.get(j)) {
                    (Some(&a), Some(&w)) if w > 1e-10 => a / w,
                    _ => 0.0,
                }
            })
            .collect()
    }

    pub fn stft_magnitude(&self, clip: &AudioClip) -> Result<SpectrogramGrid, SpectralError> {
        self.check_clip(clip)?;
        Ok(SpectrogramGrid {
            values: self.stft_complex(clip.samples()).mapv(|c| c.norm()),
            axis: GridAxis::StftBins,
        })
    }

    pub fn mel_filter(&self, grid: &SpectrogramGrid) -> Result<SpectrogramGrid, SpectralError> {
        grid.expect(GridAxis::StftBins, self.cfg.n_bins(), grid.cols())?;
        Ok(SpectrogramGrid {
            values: self.filterbank.apply(&grid.values),
            axis: GridAxis::MelBands,
        })
    }

    pub fn mel_inverse(&self, grid: &SpectrogramGrid) -> Result<SpectrogramGrid, SpectralError> {
        grid.expect(GridAxis::MelBands, self.cfg.n_mels, grid.cols())?;
        Ok(SpectrogramGrid {
            values: self.filterbank.invert(&grid.values),
            axis: GridAxis::StftBins,
        })
    }

    /// `Mel |STFT(clip)|`.
    pub fn mel_spectrogram(&self, clip: &AudioClip) -> Result<SpectrogramGrid, SpectralError> {
        self.mel_filter(&self.stft_magnitude(clip)?)
    }

    /// Fast Griffin-Lim with zero-phase initialization.
    ///
    /// `iters = 0` returns the zero-phase inverse. The accelerated update
    /// extrapolates the consistent spectrum by `momentum / (1 + momentum)` of
    /// the previous one before re-normalizing to unit-modulus phases.
    pub fn griffin_lim(&self, grid: &SpectrogramGrid, iters: usize, momentum: f64) -> Result<AudioClip, SpectralError> {
        grid.expect(GridAxis::StftBins, self.cfg.n_bins(), self.cfg.n_frames)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(SpectralError::InvalidConfig(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        let mag = &grid.values;
        let mut phase: Array2<Complex64> = Array2::from_elem(mag.dim(), Complex64::new(1.0, 0.0));
        let mut rebuilt: Array2<Complex64> = Array2::zeros(mag.dim());
        let beta = momentum / (1.0 + momentum);
        for _ in 0..iters {
            let spec = combine(mag, &phase);
            let signal = self.istft(&spec);
            let next = self.stft_complex(&signal);
            ndarray::Zip::from(&mut phase)
                .and(&next)
                .and(&rebuilt)
                .for_each(|p, &n, &prev| {
                    let v = n - prev * beta;
                    *p = v / (v.norm() + 1e-16);
                });
            rebuilt = next;
        }
        let samples = self.istft(&combine(mag, &phase));
        AudioClip::new(samples, self.cfg.sample_rate).map_err(|_| SpectralError::InvalidValue)
    }

    /// `||STFT(clip)| - grid|_F / |grid|_F`.
    pub fn spectral_convergence(&self, clip: &AudioClip, grid: &SpectrogramGrid) -> Result<f64, SpectralError> {
        let rebuilt = self.stft_magnitude(clip)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in rebuilt.values.iter().zip(grid.values.iter()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
    }
}

fn combine(mag: &Array2<f64>, phase: &Array2<Complex64>) -> Array2<Complex64> {
    ndarray::Zip::from(mag).and(phase).map_collect(|&m, &p| p * m)
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror-reflects `i` into `0..len` without repeating the edge sample.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub fn stft_magnitude(clip: &AudioClip, cfg: &SpectralConfig) -> Result<SpectrogramGrid, SpectralError> {
    Spectral::new(cfg)?.stft_magnitude(clip)
}

pub fn mel_filter(grid: &SpectrogramGrid, cfg: &SpectralConfig) -> Result<SpectrogramGrid, SpectralError> {
    Spectral::new(cfg)?.mel_filter(grid)
}

pub fn mel_inverse(grid: &SpectrogramGrid, cfg: &SpectralConfig) -> Result<SpectrogramGrid, SpectralError> {
    Spectral::new(cfg)?.mel_inverse(grid)
}

pub fn griffin_lim(
    grid: &SpectrogramGrid,
    cfg: &SpectralConfig,
    iters: usize,
    momentum: f64,
) -> Result<AudioClip, SpectralError> {
    Spectral::new(cfg)?.griffin_lim(grid, iters, momentum)
}
