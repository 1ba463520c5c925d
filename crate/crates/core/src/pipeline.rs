//! End-to-end blend: preprocessing, stage one, amplification, reconstruction.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{conform_rate, fit_length, mix, write_wav, AudioClip, AudioError};
use crate::genpipe::{stage_one, BackendSpec, GenError, GeneratorBackend, StageOneOptions};
use crate::loudness::{measure_lufs, normalize_lufs, LoudnessError, Lufs, DEFAULT_NOISE_TARGET_LUFS};
use crate::masking::{
    amplify, masking_thresholds, solve_breakpoint, solve_subgradient, AmplificationProblem, AmplificationSolution,
    MaskingThresholds, SolverError, SolverKind, SubgradientSettings, DEFAULT_ALPHA, DEFAULT_LAMBDA_MAX, DEFAULT_SMR_DB,
};
use crate::report::{
    diff_heatmap, emit_report, Artifacts, BlendReport, LoudnessSummary, Overflow, ReportError, Timing, SCHEMA_VERSION,
};
use crate::specimage::{
    extract_core_mask, image_to_mel, mel_to_image, BinaryMask, ImageError, ImageMapping, Keep, SpecImage,
    CORE_FRACTION_RANGE, DEFAULT_CORE_FRACTION, DEFAULT_DYNAMIC_RANGE_DB,
};
use crate::spectral::{amp_to_db, Spectral, SpectralConfig, SpectralError, SpectrogramGrid};

pub const DEFAULT_GL_ITERS: usize = 32;
pub const DEFAULT_GL_MOMENTUM: f64 = 0.99;

/// Broad failure class, mapped to the CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Input,
    Backend,
    Solver,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Input => 2,
            Category::Backend => 3,
            Category::Solver => 4,
            Category::Io => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Input => "input",
            Category::Backend => "backend",
            Category::Solver => "solver",
            Category::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Loudness(#[from] LoudnessError),
    #[error(transparent)]
    Report(Box<ReportError>),
    #[error("cannot create {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ReportError> for PipelineError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Pipeline(inner) => *inner,
            other => PipelineError::Report(Box::new(other)),
        }
    }
}

impl PipelineError {
    pub fn category(&self) -> Category {
        match self {
            PipelineError::Config(_) | PipelineError::Spectral(_) | PipelineError::Loudness(_) => Category::Input,
            PipelineError::Audio(AudioError::Write { .. }) => Category::Io,
            PipelineError::Audio(_) => Category::Input,
            PipelineError::Image(ImageError::Write { .. } | ImageError::Read { .. }) => Category::Io,
            PipelineError::Image(_) => Category::Input,
            PipelineError::Generator(GenError::InvalidRequest(_)) => Category::Input,
            PipelineError::Generator(_) => Category::Backend,
            PipelineError::Solver(SolverError::Spectral(_)) => Category::Input,
            PipelineError::Solver(_) => Category::Solver,
            PipelineError::Report(e) => match e.as_ref() {
                ReportError::Solver(_) => Category::Solver,
                ReportError::Loudness(_) => Category::Input,
                _ => Category::Io,
            },
            PipelineError::Io { .. } => Category::Io,
        }
    }
}

/// How the noise is conditioned before analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSettings {
    /// Loudness target; `None` leaves the level untouched.
    pub target_lufs: Option<f64>,
    pub core_fraction: f64,
    pub dynamic_range_db: f64,
    pub allow_resample: bool,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            target_lufs: Some(DEFAULT_NOISE_TARGET_LUFS),
            core_fraction: DEFAULT_CORE_FRACTION,
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
            allow_resample: false,
        }
    }
}

/// Everything derived from the noise alone.
#[derive(Debug, Clone)]
pub struct NoiseAnalysis {
    /// Canonical-length, loudness-normalized noise.
    pub clip: AudioClip,
    pub loudness_before: Lufs,
    pub loudness_after: Lufs,
    pub stft: SpectrogramGrid,
    pub mel: SpectrogramGrid,
    pub image: SpecImage,
    pub mask: BinaryMask,
}

/// Conforms rate and length, normalizes loudness, and builds the image and
/// core mask. Noise that cannot be measured (silence) is left at its level.
pub fn prepare_noise(
    clip: &AudioClip,
    spectral: &Spectral,
    settings: &NoiseSettings,
) -> Result<NoiseAnalysis, PipelineError> {
    clip.require_non_empty()?;
    let cfg = spectral.config();
    let clip = conform_rate(clip.clone(), cfg.sample_rate, settings.allow_resample)?;
    let (clip, _) = fit_length(&clip, cfg.canonical_len());
    let before = measure_lufs(&clip)?.integrated_lufs;
    let (clip, after) = match (before, settings.target_lufs) {
        (Lufs::Value(_), Some(target)) => {
            let n = normalize_lufs(&clip, target)?;
            (n.clip, Lufs::Value(n.measured_after))
        }
        (Lufs::Immeasurable, Some(_)) => {
            warn!("noise is immeasurable; skipping loudness normalization");
            (clip, before)
        }
        (_, None) => (clip, before),
    };
    let stft = spectral.stft_magnitude(&clip)?;
    let mel = spectral.mel_filter(&stft)?;
    let mapping = ImageMapping::for_grid(&mel, settings.dynamic_range_db)?;
    let image = mel_to_image(&mel, mapping)?;
    let mask = extract_core_mask(&image, settings.core_fraction)?;
    Ok(NoiseAnalysis {
        clip,
        loudness_before: before,
        loudness_after: after,
        stft,
        mel,
        image,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub kind: SolverKind,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub subgradient: SubgradientSettings,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kind: SolverKind::Subgradient,
            lambda_min: 0.0,
            lambda_max: DEFAULT_LAMBDA_MAX,
            subgradient: SubgradientSettings::default(),
        }
    }
}

/// Stage-two outcome for one music grid against one noise.
#[derive(Debug, Clone)]
pub struct Amplification {
    pub thresholds: MaskingThresholds,
    pub solution: AmplificationSolution,
    pub amplified: SpectrogramGrid,
    pub coverage_before: f64,
    pub coverage_after: f64,
    pub deficit_before: f64,
    pub deficit_after: f64,
}

pub fn stage_two(
    spectral: &Spectral,
    noise_stft: &SpectrogramGrid,
    music_mel: &SpectrogramGrid,
    mask: &BinaryMask,
    alpha: f64,
    smr_db: f64,
    solver: &SolverSettings,
) -> Result<Amplification, PipelineError> {
    let thresholds = masking_thresholds(spectral, noise_stft, smr_db)?;
    let problem = AmplificationProblem::with_bounds(
        music_mel.values(),
        thresholds.values.values(),
        mask,
        alpha,
        solver.lambda_min,
        solver.lambda_max,
    )?;
    let solution = match solver.kind {
        SolverKind::Breakpoint => solve_breakpoint(&problem)?,
        SolverKind::Subgradient => {
            let mut settings = solver.subgradient;
            settings.init = settings.init.clamp(solver.lambda_min, solver.lambda_max);
            solve_subgradient(&problem, &settings)?
        }
    };
    let lambda = solution.lambda_star;
    info!(
        "lambda* = {lambda:.4} ({:?}, {} iterations), coverage {:.3}",
        solution.solver, solution.iterations, solution.coverage
    );
    Ok(Amplification {
        amplified: amplify(music_mel, lambda),
        coverage_before: problem.coverage(1.0),
        coverage_after: problem.coverage(lambda),
        deficit_before: problem.residual_deficit(1.0),
        deficit_after: problem.residual_deficit(lambda),
        thresholds,
        solution,
    })
}

/// Full settings for one blend run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub prompt: String,
    pub seed: u64,
    pub backend: BackendSpec,
    pub alpha: f64,
    pub smr_db: f64,
    pub core_fraction: f64,
    pub target_lufs_noise: f64,
    pub dynamic_range_db: f64,
    pub solver: SolverSettings,
    pub griffin_lim_iters: usize,
    pub griffin_lim_momentum: f64,
    pub stage_one: StageOneOptions,
    pub allow_resample: bool,
    pub spectral: SpectralConfig,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            prompt: "calm lo-fi music".into(),
            seed: 0,
            backend: BackendSpec::Stub,
            alpha: DEFAULT_ALPHA,
            smr_db: DEFAULT_SMR_DB,
            core_fraction: DEFAULT_CORE_FRACTION,
            target_lufs_noise: DEFAULT_NOISE_TARGET_LUFS,
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
            solver: SolverSettings::default(),
            griffin_lim_iters: DEFAULT_GL_ITERS,
            griffin_lim_momentum: DEFAULT_GL_MOMENTUM,
            stage_one: StageOneOptions::default(),
            allow_resample: false,
            spectral: SpectralConfig::default(),
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.prompt.trim().is_empty() {
            return bad("prompt must not be empty".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        let (lo, hi) = CORE_FRACTION_RANGE;
        if !(lo..=hi).contains(&self.core_fraction) {
            return bad(format!("core fraction {} outside [{lo}, {hi}]", self.core_fraction));
        }
        if !self.target_lufs_noise.is_finite() {
            return bad("noise target loudness must be finite".into());
        }
        self.spectral.validate()?;
        Ok(())
    }

    pub fn noise_settings(&self) -> NoiseSettings {
        NoiseSettings {
            target_lufs: Some(self.target_lufs_noise),
            core_fraction: self.core_fraction,
            dynamic_range_db: self.dynamic_range_db,
            allow_resample: self.allow_resample,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlendOutcome {
    pub report: BlendReport,
    pub report_path: PathBuf,
    pub music: AudioClip,
    pub mix: AudioClip,
}

pub fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Runs both stages and writes every artifact plus `report.json` to `out_dir`.
pub fn run_blend(
    noise: &AudioClip,
    cfg: &BlendConfig,
    backend: &mut dyn GeneratorBackend,
    out_dir: &Path,
) -> Result<BlendOutcome, PipelineError> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let artifacts = Artifacts::standard();
    let at = |p: &Path| out_dir.join(p);
    let total = Instant::now();

    let clock = Instant::now();
    let spectral = Spectral::new(&cfg.spectral)?;
    let analysis = prepare_noise(noise, &spectral, &cfg.noise_settings())?;
    let preprocess = clock.elapsed().as_secs_f64();
    analysis.image.write_png(at(&artifacts.x_noise))?;
    analysis.mask.write_png(at(&artifacts.mask), Keep::Core)?;

    let clock = Instant::now();
    let stage1 = stage_one(
        &analysis.image,
        &analysis.mask,
        &cfg.prompt,
        cfg.seed,
        backend,
        &cfg.stage_one,
    )?;
    let stage1_secs = clock.elapsed().as_secs_f64();
    stage1.x_mid.write_png(at(&artifacts.x_mid))?;
    stage1.x_music.write_png(at(&artifacts.x_music))?;

    let clock = Instant::now();
    let music_mel = image_to_mel(&stage1.x_music);
    let amp = stage_two(
        &spectral,
        &analysis.stft,
        &music_mel,
        &analysis.mask,
        cfg.alpha,
        cfg.smr_db,
        &cfg.solver,
    )?;
    let stage2 = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let music = reconstruct(
        &spectral,
        &amp.amplified,
        cfg.griffin_lim_iters,
        cfg.griffin_lim_momentum,
    )?;
    let reconstruct_secs = clock.elapsed().as_secs_f64();
    let mixed = mix(&music, &analysis.clip)?;

    diff_heatmap(&amp.amplified, &analysis.mel)?.write_png(&at(&artifacts.diff_heatmap))?;
    write_wav(&analysis.clip, at(&artifacts.noise_wav), true)?;
    if music.overflowed() {
        warn!("music peak {:.3} exceeds full scale; clipping on write", music.peak());
    }
    write_wav(&music, at(&artifacts.music_wav), true)?;
    write_wav(&mixed, at(&artifacts.mix_wav), true)?;

    let report = BlendReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        backend_id: stage1.backend_id,
        lambda_star: amp.solution.lambda_star,
        core_count: analysis.mask.core_count(),
        coverage_before: amp.coverage_before,
        coverage_after: amp.coverage_after,
        residual_deficit_before: amp.deficit_before,
        residual_deficit_after: amp.deficit_after,
        unmaskable_count: amp.solution.unmaskable_count,
        solver: amp.solution,
        loudness: LoudnessSummary {
            noise_input: analysis.loudness_before,
            noise: analysis.loudness_after,
            music: measure_lufs(&music)?.integrated_lufs,
            mix: measure_lufs(&mixed)?.integrated_lufs,
        },
        overflow: Overflow {
            music: music.overflowed(),
            mix: mixed.overflowed(),
        },
        timing: Timing {
            preprocess,
            stage1: stage1_secs,
            stage2,
            reconstruct: reconstruct_secs,
            total: total.elapsed().as_secs_f64(),
        },
        artifacts,
        fad: None,
        kl: None,
    };
    let report_path = emit_report(&report, out_dir)?;
    Ok(BlendOutcome {
        report,
        report_path,
        music,
        mix: mixed,
    })
}

/// Mel grid back to audio: inverse mel, then Griffin-Lim.
pub fn reconstruct(
    spectral: &Spectral,
    mel: &SpectrogramGrid,
    iters: usize,
    momentum: f64,
) -> Result<AudioClip, PipelineError> {
    let stft = spectral.mel_inverse(mel)?;
    Ok(spectral.griffin_lim(&stft, iters, momentum)?)
}

/// Min, median and max of a grid in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbStats {
    pub min_db: f64,
    pub median_db: f64,
    pub max_db: f64,
}

impl DbStats {
    pub fn of(grid: &SpectrogramGrid) -> Self {
        let mut db: Vec<f64> = grid.values().iter().map(|&v| amp_to_db(v)).collect();
        db.sort_by(f64::total_cmp);
        let n = db.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            db[n / 2]
        } else {
            0.5 * (db[n / 2 - 1] + db[n / 2])
        };
        Self {
            min_db: db.first().copied().unwrap_or(f64::NAN),
            median_db: median,
            max_db: db.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub core_fraction: f64,
    pub core_count: usize,
    pub width: usize,
    pub height: usize,
    pub noise_loudness: Lufs,
    pub smr_db: f64,
    pub thresholds: DbStats,
    pub mel_png: PathBuf,
    pub mask_png: PathBuf,
}

/// Writes the noise image and core mask (core = 255) and summarizes the
/// masking thresholds.
pub fn analyze(
    noise: &AudioClip,
    spectral_cfg: &SpectralConfig,
    settings: &NoiseSettings,
    smr_db: f64,
    out_dir: &Path,
) -> Result<AnalysisSummary, PipelineError> {
    ensure_dir(out_dir)?;
    let spectral = Spectral::new(spectral_cfg)?;
    let analysis = prepare_noise(noise, &spectral, settings)?;
    let thresholds = masking_thresholds(&spectral, &analysis.stft, smr_db)?;
    let mel_png = PathBuf::from("x_noise.png");
    let mask_png = PathBuf::from("mask.png");
    analysis.image.write_png(out_dir.join(&mel_png))?;
    analysis.mask.write_png(out_dir.join(&mask_png), Keep::Core)?;
    let (width, height) = analysis.image.dims();
    Ok(AnalysisSummary {
        core_fraction: settings.core_fraction,
        core_count: analysis.mask.core_count(),
        width,
        height,
        noise_loudness: analysis.loudness_after,
        smr_db,
        thresholds: DbStats::of(&thresholds.values),
        mel_png,
        mask_png,
    })
}
