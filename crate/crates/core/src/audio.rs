//! Mono PCM clips, WAV I/O and sample-level utilities.
//!
//! Everything downstream works on a single channel of `f64` samples at the
//! pipeline's native rate. Stereo input is averaged to mono on read; other
//! rates are rejected unless resampling is requested explicitly.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rubato::{Resampler, SincFixedIn, SincInterpolationParameters, SincInterpolationType, WindowFunction};
use thiserror::Error;

/// Full-scale divisor for 16-bit PCM.
const I16_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported WAV format in {path}: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("audio clip is empty")]
    Empty,
    #[error("sample {index} is out of range ({value}); pass clip=true to clip on write")]
    OutOfRange { index: usize, value: f64 },
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    RateMismatch { left: u32, right: u32 },
    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },
    #[error("resampling failed: {0}")]
    Resample(String),
}

/// A mono clip of finite samples at a fixed sample rate.
///
/// Samples are nominally in `[-1, 1]`; values outside that range are allowed
/// in memory (the result of gain or mixing) and flagged through
/// [`AudioClip::overflowed`], but are refused by [`write_wav`] unless
/// clipping is requested.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    overflow: bool,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite { index });
        }
        let overflow = samples.iter().any(|s| s.abs() > 1.0);
        Ok(Self {
            samples,
            sample_rate,
            overflow,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
            overflow: false,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// True when any sample lies outside `[-1, 1]`.
    pub fn overflowed(&self) -> bool {
        self.overflow
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Clips entering the pipeline must be non-empty.
    pub fn require_non_empty(&self) -> Result<(), AudioError> {
        if self.is_empty() {
            Err(AudioError::Empty)
        } else {
            Ok(())
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let samples: Vec<f64> = self.samples.iter().map(|&s| f(s)).collect();
        let overflow = samples.iter().any(|s| s.abs() > 1.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
            overflow,
        }
    }
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float, mono or stereo).
///
/// Stereo is averaged to mono and integer samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| AudioError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(AudioError::Unsupported {
            path: path.to_path_buf(),
            detail: format!("{channels} channels (expected 1 or 2)"),
        });
    }
    let read_err = |source| AudioError::Read {
        path: path.to_path_buf(),
        source,
    };
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / I16_SCALE))
            .collect::<Result<_, _>>()
            .map_err(read_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(read_err)?,
        (format, bits) => {
            return Err(AudioError::Unsupported {
                path: path.to_path_buf(),
                detail: format!("{bits}-bit {format:?} samples"),
            })
        }
    };
    let mono: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|pair| 0.5 * (pair[0] + pair[1]))
            .collect()
    };
    if mono.is_empty() {
        return Err(AudioError::Empty);
    }
    AudioClip::new(mono, spec.sample_rate)
}

/// Writes a 16-bit PCM mono WAV.
///
/// Samples outside `[-1, 1]` are an error unless `clip` is set, in which case
/// they are saturated.
pub fn write_wav(audio: &AudioClip, path: impl AsRef<Path>, clip: bool) -> Result<(), AudioError> {
    let path = path.as_ref();
    clip_ok(audio, clip)?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let write_err = |source| AudioError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for &s in audio.samples() {
        writer.write_sample(quantize_i16(s)).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

fn clip_ok(c: &AudioClip, allow_clip: bool) -> Result<(), AudioError> {
    c.require_non_empty()?;
    if !allow_clip {
        if let Some(index) = c.samples.iter().position(|s| s.abs() > 1.0) {
            return Err(AudioError::OutOfRange {
                index,
                value: c.samples[index],
            });
        }
    }
    Ok(())
}

fn quantize_i16(s: f64) -> i16 {
    (s * I16_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Sample-wise sum; the shorter clip is zero-padded. The result's overflow
/// flag is set when any output sample leaves `[-1, 1]`.
pub fn mix(a: &AudioClip, b: &AudioClip) -> Result<AudioClip, AudioError> {
    if a.sample_rate != b.sample_rate {
        return Err(AudioError::RateMismatch {
            left: a.sample_rate,
            right: b.sample_rate,
        });
    }
    let n = a.len().max(b.len());
    let at = |c: &AudioClip, i: usize| c.samples.get(i).copied().unwrap_or(0.0);
    let samples: Vec<f64> = (0..n).map(|i| at(a, i) + at(b, i)).collect();
    let clip = AudioClip::new(samples, a.sample_rate)?;
    if clip.overflowed() {
        warn!("mix overflow: peak {:.4} exceeds full scale", clip.peak());
    }
    Ok(clip)
}

pub fn db_to_gain(gain_db: f64) -> f64 {
    10f64.powf(gain_db / 20.0)
}

/// Multiplies every sample by `10^(gain_db / 20)`.
pub fn apply_gain(clip: &AudioClip, gain_db: f64) -> AudioClip {
    scale(clip, db_to_gain(gain_db))
}

/// Multiplies every sample by a linear factor.
pub fn scale(clip: &AudioClip, factor: f64) -> AudioClip {
    clip.map(|s| s * factor)
}

/// How a clip was brought to the canonical length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthAdjustment {
    Unchanged,
    Padded { added: usize },
    Truncated { removed: usize },
}

/// Zero-pads at the end or truncates to exactly `len` samples.
pub fn fit_length(clip: &AudioClip, len: usize) -> (AudioClip, LengthAdjustment) {
    let mut samples = clip.samples.clone();
    let adjustment = match samples.len().cmp(&len) {
        std::cmp::Ordering::Equal => LengthAdjustment::Unchanged,
        std::cmp::Ordering::Less => {
            let added = len - samples.len();
            samples.resize(len, 0.0);
            info!("padded clip with {added} trailing zeros to {len} samples");
            LengthAdjustment::Padded { added }
        }
        std::cmp::Ordering::Greater => {
            let removed = samples.len() - len;
            samples.truncate(len);
            info!("truncated clip by {removed} samples to {len} samples");
            LengthAdjustment::Truncated { removed }
        }
    };
    let overflow = samples.iter().any(|s| s.abs() > 1.0);
    (
        AudioClip {
            samples,
            sample_rate: clip.sample_rate,
            overflow,
        },
        adjustment,
    )
}

/// Windowed-sinc resampling to `target_rate`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    clip.require_non_empty()?;
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let params = SincInterpolationParameters {
        sinc_len: 256,
        f_cutoff: 0.95,
        interpolation: SincInterpolationType::Linear,
        oversampling_factor: 256,
        window: WindowFunction::BlackmanHarris2,
    };
    let mut resampler =
        SincFixedIn::<f64>::new(ratio, 1.0, params, clip.len(), 1).map_err(|e| AudioError::Resample(e.to_string()))?;
    let expected = (clip.len() as f64 * ratio).round() as usize;
    // Flush with a partial call so the tail is not lost.
    let mut out = resampler
        .process(std::slice::from_ref(&clip.samples), None)
        .map_err(|e| AudioError::Resample(e.to_string()))?
        .remove(0);
    let tail = resampler
        .process_partial::<Vec<f64>>(None, None)
        .map_err(|e| AudioError::Resample(e.to_string()))?
        .remove(0);
    out.extend(tail);
    let samples: Vec<f64> = out.into_iter().take(expected).collect();
    AudioClip::new(samples, target_rate)
}

/// Ensures `clip` is at `rate`, resampling only when `allow_resample` is set.
pub fn conform_rate(clip: AudioClip, rate: u32, allow_resample: bool) -> Result<AudioClip, AudioError> {
    if clip.sample_rate == rate {
        Ok(clip)
    } else if allow_resample {
        info!("resampling {} Hz -> {} Hz", clip.sample_rate, rate);
        resample(&clip, rate)
    } else {
        Err(AudioError::RateMismatch {
            left: clip.sample_rate,
            right: rate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sine(freq: f64, amp: f64, len: usize, rate: u32) -> AudioClip {
        let samples = (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioClip::new(samples, rate).unwrap()
    }

    fn write_raw<S: hound::Sample + Copy>(path: &Path, spec: hound::WavSpec, samples: &[S]) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn reads_one_second_of_silence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        write_raw(&path, spec, &vec![0i16; 44100]);
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.len(), 44100);
        assert_eq!(clip.sample_rate(), 44100);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_antiphase_downmixes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let data: Vec<i16> = (0..1000)
            .flat_map(|i| {
                let x = ((i * 37) % 20000) as i16 - 10000;
                [x, -x]
            })
            .collect();
        write_raw(&path, spec, &data);
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.len(), 1000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_int_maps_below_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        write_raw(&path, spec, &[32767i16, -32768]);
        let clip = read_wav(&path).unwrap();
        assert_abs_diff_eq!(clip.samples()[0], 32767.0 / 32768.0, epsilon = 1e-15);
        assert_abs_diff_eq!(clip.samples()[1], -1.0, epsilon = 1e-15);

        let out = dir.path().join("fs2.wav");
        write_wav(&clip, &out, false).unwrap();
        assert_eq!(read_wav(&out).unwrap(), clip);
    }

    #[test]
    fn reads_float_wav() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        write_raw(&path, spec, &[0.25f32, -0.5, 0.125]);
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.samples(), &[0.25, -0.5, 0.125]);
        assert_eq!(clip.sample_rate(), 22050);
    }

    #[test]
    fn rejects_24_bit_and_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44100,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        write_raw(&path, spec, &[1i32, 2, 3]);
        assert!(matches!(read_wav(&path), Err(AudioError::Unsupported { .. })));

        let empty = dir.path().join("empty.wav");
        let spec16 = hound::WavSpec {
            bits_per_sample: 16,
            ..spec
        };
        write_raw::<i16>(&empty, spec16, &[]);
        assert!(matches!(read_wav(&empty), Err(AudioError::Empty)));

        assert!(matches!(
            read_wav(dir.path().join("nope.wav")),
            Err(AudioError::Read { .. })
        ));
    }

    #[test]
    fn sine_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let clip = sine(440.0, 0.5, 44100, 44100);
        write_wav(&clip, &path, false).unwrap();
        let back = read_wav(&path).unwrap();
        let max_err = clip
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
    }

    #[test]
    fn write_rejects_out_of_range_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let loud = AudioClip::new(vec![0.0, 1.5, 0.0], 44100).unwrap();
        assert!(matches!(
            write_wav(&loud, &path, false),
            Err(AudioError::OutOfRange { index: 1, .. })
        ));
        write_wav(&loud, &path, true).unwrap();
        assert_abs_diff_eq!(read_wav(&path).unwrap().samples()[1], 32767.0 / 32768.0);

        let empty = AudioClip::new(vec![], 44100).unwrap();
        assert!(matches!(write_wav(&empty, &path, false), Err(AudioError::Empty)));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(AudioClip::new(vec![1.0], 0), Err(AudioError::ZeroSampleRate)));
        assert!(matches!(
            AudioClip::new(vec![0.0, f64::NAN], 44100),
            Err(AudioError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn mix_identities() {
        let x = sine(300.0, 0.3, 1000, 44100);
        let silence = AudioClip::silence(1000, 44100);
        assert_eq!(mix(&x, &silence).unwrap().samples(), x.samples());
        let neg = scale(&x, -1.0);
        assert!(mix(&x, &neg).unwrap().samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn mix_flags_overflow() {
        let a = sine(441.0, 0.8, 4410, 44100);
        let m = mix(&a, &a).unwrap();
        assert!(m.overflowed());
        assert_abs_diff_eq!(m.peak(), 1.6, epsilon = 1e-9);
    }

    #[test]
    fn mix_pads_shorter_and_checks_rate() {
        let a = AudioClip::new(vec![0.1, 0.2, 0.3], 44100).unwrap();
        let b = AudioClip::new(vec![0.5], 44100).unwrap();
        assert_eq!(mix(&a, &b).unwrap().samples(), &[0.6, 0.2, 0.3]);
        let c = AudioClip::new(vec![0.5], 48000).unwrap();
        assert!(matches!(mix(&a, &c), Err(AudioError::RateMismatch { .. })));
    }

    #[test]
    fn gain_examples() {
        let unit = AudioClip::new(vec![1.0, 0.01], 44100).unwrap();
        assert_eq!(apply_gain(&unit, 0.0), unit);
        assert_abs_diff_eq!(apply_gain(&unit, -6.0206).samples()[0], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(apply_gain(&unit, 20.0).samples()[1], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn fit_length_pads_and_truncates() {
        let c = AudioClip::new(vec![0.1; 5], 8000).unwrap();
        let (p, adj) = fit_length(&c, 8);
        assert_eq!(adj, LengthAdjustment::Padded { added: 3 });
        assert_eq!(&p.samples()[5..], &[0.0; 3]);
        let (t, adj) = fit_length(&c, 2);
        assert_eq!(adj, LengthAdjustment::Truncated { removed: 3 });
        assert_eq!(t.len(), 2);
        assert_eq!(fit_length(&c, 5).1, LengthAdjustment::Unchanged);
    }

    #[test]
    fn rate_conformance() {
        let c = sine(1000.0, 0.5, 48000, 48000);
        assert!(matches!(
            conform_rate(c.clone(), 44100, false),
            Err(AudioError::RateMismatch { .. })
        ));
        let r = conform_rate(c, 44100, true).unwrap();
        assert_eq!(r.sample_rate(), 44100);
        assert_eq!(r.len(), 44100);
        // Away from the edges the 1 kHz tone survives with its amplitude.
        let mid = &r.samples()[2000..42000];
        let peak = mid.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 0.01, "peak {peak}");
        let expected = (0..r.len()).map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 44100.0).sin());
        let err = mid
            .iter()
            .zip(expected.skip(2000))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.01, "resampled waveform error {err}");
    }

    proptest! {
        #[test]
        fn mix_commutes_and_associates(
            a in proptest::collection::vec(-1.0f64..1.0, 1..64),
            b in proptest::collection::vec(-1.0f64..1.0, 1..64),
            c in proptest::collection::vec(-1.0f64..1.0, 1..64),
        ) {
            let (a, b, c) = (
                AudioClip::new(a, 8000).unwrap(),
                AudioClip::new(b, 8000).unwrap(),
                AudioClip::new(c, 8000).unwrap(),
            );
            let ab = mix(&a, &b).unwrap();
            let ba = mix(&b, &a).unwrap();
            for (x, y) in ab.samples().iter().zip(ba.samples()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let left = mix(&ab, &c).unwrap();
            let right = mix(&a, &mix(&b, &c).unwrap()).unwrap();
            for (x, y) in left.samples().iter().zip(right.samples()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn gain_inverts(
            s in proptest::collection::vec(-1.0f64..1.0, 1..64),
            g in -60.0f64..60.0,
        ) {
            let x = AudioClip::new(s, 8000).unwrap();
            let y = apply_gain(&apply_gain(&x, g), -g);
            for (a, b) in x.samples().iter().zip(y.samples()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn wav_round_trip_bounded(s in proptest::collection::vec(-1.0f64..=1.0, 1..256)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.wav");
            let x = AudioClip::new(s, 44100).unwrap();
            write_wav(&x, &path, false).unwrap();
            let y = read_wav(&path).unwrap();
            for (a, b) in x.samples().iter().zip(y.samples()) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
