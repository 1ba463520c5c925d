//! Run reports, difference heatmaps and loudness sweeps.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audio::{fit_length, mix, AudioClip};
use crate::loudness::{measure_lufs, normalize_lufs, LoudnessError, Lufs, DEFAULT_NOISE_TARGET_LUFS};
use crate::masking::AmplificationSolution;
use crate::masking::{masking_thresholds, AmplificationProblem, SolverError, DEFAULT_SMR_DB};
use crate::pipeline::{prepare_noise, BlendConfig, NoiseSettings, PipelineError};
use crate::specimage::{BinaryMask, DEFAULT_CORE_FRACTION, DEFAULT_DYNAMIC_RANGE_DB};
use crate::spectral::{amp_to_db, Spectral, SpectralConfig, SpectrogramGrid};

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const HEATMAP_CLIP_DB: f64 = 40.0;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("report field `{0}` is not a finite number")]
    NonFinite(String),
    #[error("artifact {0} is missing from the report directory")]
    MissingArtifact(PathBuf),
    #[error("artifact path {0} must be relative")]
    AbsoluteArtifact(PathBuf),
    #[error("grid dimensions differ: {0:?} vs {1:?}")]
    Dimensions((usize, usize), (usize, usize)),
    #[error("cannot encode heatmap {path}: {detail}")]
    Png { path: PathBuf, detail: String },
    #[error(transparent)]
    Loudness(#[from] LoudnessError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Pipeline(Box<PipelineError>),
}

impl From<PipelineError> for ReportError {
    fn from(e: PipelineError) -> Self {
        ReportError::Pipeline(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoudnessSummary {
    /// Noise as read, before normalization.
    pub noise_input: Lufs,
    pub noise: Lufs,
    pub music: Lufs,
    pub mix: Lufs,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub preprocess: f64,
    pub stage1: f64,
    pub stage2: f64,
    pub reconstruct: f64,
    pub total: f64,
}

/// Samples outside full scale, clipped when written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Overflow {
    pub music: bool,
    pub mix: bool,
}

/// Artifact paths relative to the report directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub x_noise: PathBuf,
    pub mask: PathBuf,
    pub x_mid: PathBuf,
    pub x_music: PathBuf,
    pub diff_heatmap: PathBuf,
    pub noise_wav: PathBuf,
    pub music_wav: PathBuf,
    pub mix_wav: PathBuf,
}

impl Artifacts {
    pub fn standard() -> Self {
        Self {
            x_noise: "x_noise.png".into(),
            mask: "mask.png".into(),
            x_mid: "x_mid.png".into(),
            x_music: "x_music.png".into(),
            diff_heatmap: "diff_heatmap.png".into(),
            noise_wav: "noise.wav".into(),
            music_wav: "music.wav".into(),
            mix_wav: "mix.wav".into(),
        }
    }

    pub fn all(&self) -> [&Path; 8] {
        [
            &self.x_noise,
            &self.mask,
            &self.x_mid,
            &self.x_music,
            &self.diff_heatmap,
            &self.noise_wav,
            &self.music_wav,
            &self.mix_wav,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendReport {
    pub schema_version: u32,
    pub config: BlendConfig,
    pub backend_id: String,
    pub lambda_star: f64,
    pub solver: AmplificationSolution,
    pub core_count: usize,
    pub coverage_before: f64,
    pub coverage_after: f64,
    pub residual_deficit_before: f64,
    pub residual_deficit_after: f64,
    pub unmaskable_count: usize,
    pub loudness: LoudnessSummary,
    pub overflow: Overflow,
    pub timing: Timing,
    pub artifacts: Artifacts,
    /// Reserved for externally computed distribution metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

/// Rejects `null` anywhere in the document: serde writes non-finite floats
/// as `null`, and the schema allows only numbers or `"immeasurable"`.
fn check_finite(value: &Value, path: &str) -> Result<(), ReportError> {
    match value {
        Value::Null => Err(ReportError::NonFinite(path.to_string())),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .try_for_each(|(i, v)| check_finite(v, &format!("{path}[{i}]"))),
        Value::Object(map) => map.iter().try_for_each(|(k, v)| {
            let child = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            check_finite(v, &child)
        }),
        _ => Ok(()),
    }
}

/// Writes `report.json` into `dir` after checking that every artifact it
/// names exists there.
pub fn emit_report(report: &BlendReport, dir: &Path) -> Result<PathBuf, ReportError> {
    for artifact in report.artifacts.all() {
        if artifact.is_absolute() {
            return Err(ReportError::AbsoluteArtifact(artifact.to_path_buf()));
        }
        if !dir.join(artifact).is_file() {
            return Err(ReportError::MissingArtifact(artifact.to_path_buf()));
        }
    }
    let value = serde_json::to_value(report)?;
    check_finite(&value, "")?;
    let path = dir.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(&path, text).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn read_report(path: &Path) -> Result<BlendReport, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Signed per-cell dB difference, music minus noise, indexed `[band, frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffHeatmap {
    pub values: Array2<f64>,
}

impl DiffHeatmap {
    /// Red for positive, blue for negative, white at zero; saturation grows
    /// linearly up to the +-40 dB clip.
    pub fn color(db: f64) -> [u8; 3] {
        let t = (db.abs() / HEATMAP_CLIP_DB).min(1.0);
        let fade = (255.0 * (1.0 - t)).round() as u8;
        if db > 0.0 {
            [255, fade, fade]
        } else if db < 0.0 {
            [fade, fade, 255]
        } else {
            [255, 255, 255]
        }
    }

    /// RGB pixels `[row, col, channel]`, highest band in the top row.
    pub fn rendered(&self) -> Vec<[u8; 3]> {
        let (rows, cols) = self.values.dim();
        let mut out = Vec::with_capacity(rows * cols);
        for r in (0..rows).rev() {
            for c in 0..cols {
                out.push(Self::color(self.values[[r, c]]));
            }
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ReportError> {
        let err = |detail: String| ReportError::Png {
            path: path.to_path_buf(),
            detail,
        };
        let (rows, cols) = self.values.dim();
        let file = File::create(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| err(e.to_string()))?;
        let data: Vec<u8> = self.rendered().into_iter().flatten().collect();
        writer.write_image_data(&data).map_err(|e| err(e.to_string()))
    }
}

pub fn diff_heatmap(music: &SpectrogramGrid, noise: &SpectrogramGrid) -> Result<DiffHeatmap, ReportError> {
    let (a, b) = (music.values(), noise.values());
    if a.dim() != b.dim() {
        return Err(ReportError::Dimensions(a.dim(), b.dim()));
    }
    Ok(DiffHeatmap {
        values: Zip::from(a).and(b).map_collect(|&m, &n| amp_to_db(m) - amp_to_db(n)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub spectral: SpectralConfig,
    pub core_fraction: f64,
    pub smr_db: f64,
    pub dynamic_range_db: f64,
    pub noise_target_lufs: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            spectral: SpectralConfig::default(),
            core_fraction: DEFAULT_CORE_FRACTION,
            smr_db: DEFAULT_SMR_DB,
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
            noise_target_lufs: DEFAULT_NOISE_TARGET_LUFS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_lufs: f64,
    pub music_gain_db: f64,
    pub music_lufs: f64,
    pub mix_lufs: Lufs,
    pub coverage: f64,
    pub residual_deficit: f64,
}

/// For each target: normalize the music, mix it with the normalized noise,
/// and record the mix loudness plus coverage and deficit at unit gain.
pub fn loudness_sweep(
    music: &AudioClip,
    noise: &AudioClip,
    targets: &[f64],
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>, ReportError> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let spectral = Spectral::new(&settings.spectral).map_err(PipelineError::from)?;
    let noise_settings = NoiseSettings {
        target_lufs: Some(settings.noise_target_lufs),
        core_fraction: settings.core_fraction,
        dynamic_range_db: settings.dynamic_range_db,
        allow_resample: false,
    };
    let analysis = prepare_noise(noise, &spectral, &noise_settings)?;
    if analysis.loudness_after == Lufs::Immeasurable {
        return Err(LoudnessError::Immeasurable.into());
    }
    let thresholds = masking_thresholds(&spectral, &analysis.stft, settings.smr_db)?;
    let (music, _) = fit_length(music, analysis.clip.len());
    let mut rows = Vec::with_capacity(targets.len());
    for &target in targets {
        let normalized = normalize_lufs(&music, target)?;
        let mixed = mix(&normalized.clip, &analysis.clip).map_err(PipelineError::from)?;
        let mel = spectral
            .mel_spectrogram(&normalized.clip)
            .map_err(PipelineError::from)?;
        let problem = unit_problem(&mel, &thresholds.values, &analysis.mask)?;
        rows.push(SweepRow {
            target_lufs: target,
            music_gain_db: normalized.gain_db,
            music_lufs: normalized.measured_after,
            mix_lufs: measure_lufs(&mixed)?.integrated_lufs,
            coverage: problem.coverage(1.0),
            residual_deficit: problem.residual_deficit(1.0),
        });
    }
    Ok(rows)
}

fn unit_problem(
    music: &SpectrogramGrid,
    thresholds: &SpectrogramGrid,
    mask: &BinaryMask,
) -> Result<AmplificationProblem, SolverError> {
    AmplificationProblem::new(music.values(), thresholds.values(), mask, 0.0, 1.0)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "target_lufs",
            "music_gain_db",
            "music_lufs",
            "mix_lufs",
            "coverage",
            "residual_deficit",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}
