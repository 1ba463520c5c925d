//! `bnmusic` command-line entry point.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;

use bnmusic::audio::{conform_rate, fit_length, mix, read_wav, write_wav, AudioClip, AudioError};
use bnmusic::fixtures::Fixture;
use bnmusic::genpipe::{
    serve, BackendSpec, GeneratorBackend, IdentityBackend, StageOneOptions, StubBackend, SubprocessBackend,
};
use bnmusic::loudness::DEFAULT_NOISE_TARGET_LUFS;
use bnmusic::loudness::{measure_lufs, normalize_lufs};
use bnmusic::masking::{SolverKind, DEFAULT_ALPHA, DEFAULT_LAMBDA_MAX, DEFAULT_SMR_DB};
use bnmusic::pipeline::{
    analyze, ensure_dir, prepare_noise, reconstruct, run_blend, stage_two, BlendConfig, Category, NoiseSettings,
    PipelineError, SolverSettings, DEFAULT_GL_ITERS, DEFAULT_GL_MOMENTUM,
};
use bnmusic::report::{loudness_sweep, write_sweep_csv, SweepSettings};
use bnmusic::specimage::{DEFAULT_CORE_FRACTION, DEFAULT_DYNAMIC_RANGE_DB};
use bnmusic::spectral::{Spectral, SpectralConfig};

#[derive(Parser)]
#[command(name = "bnmusic", version, about = "Blend environmental noise into generated music")]
struct Cli {
    /// Print exactly one JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: stage one generation, amplification, reconstruction.
    Blend(BlendArgs),
    /// Noise image, core mask and masking-threshold statistics.
    Analyze(AnalyzeArgs),
    /// Solve for the music gain against a noise clip.
    Amplify(AmplifyArgs),
    /// Sum two clips.
    Mix(MixArgs),
    /// Measure, and optionally normalize, integrated loudness.
    Loudness(LoudnessArgs),
    /// Loudness sweep of music against fixed noise, as CSV.
    Sweep(SweepArgs),
    /// Write the synthetic noise fixtures as WAV files.
    Fixtures(FixturesArgs),
    /// Serve the stub generator over the line protocol on stdin/stdout.
    #[command(hide = true)]
    ServeStub(ServeStubArgs),
}

#[derive(Args, Clone)]
struct SpectralArgs {
    #[arg(long, default_value_t = 44100)]
    sample_rate: u32,
    #[arg(long, default_value_t = 2048)]
    n_fft: usize,
    #[arg(long, default_value_t = 441)]
    hop_length: usize,
    #[arg(long, default_value_t = 512)]
    n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    f_min: f64,
    #[arg(long, default_value_t = 10_000.0)]
    f_max: f64,
    #[arg(long, default_value_t = 512)]
    n_frames: usize,
    /// Resample inputs whose rate differs from --sample-rate.
    #[arg(long)]
    resample: bool,
}

impl SpectralArgs {
    fn config(&self) -> SpectralConfig {
        SpectralConfig {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop_length: self.hop_length,
            n_mels: self.n_mels,
            f_min: self.f_min,
            f_max: self.f_max,
            n_frames: self.n_frames,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Subgradient,
    Breakpoint,
}

impl From<SolverArg> for SolverKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Subgradient => SolverKind::Subgradient,
            SolverArg::Breakpoint => SolverKind::Breakpoint,
        }
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_SMR_DB, allow_hyphen_values = true)]
    smr_db: f64,
    #[arg(long, default_value_t = DEFAULT_CORE_FRACTION)]
    core_fraction: f64,
    #[arg(long, value_enum, default_value = "subgradient")]
    solver: SolverArg,
    #[arg(long, default_value_t = 0.0)]
    lambda_min: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_MAX)]
    lambda_max: f64,
}

impl SolverArgs {
    fn settings(&self) -> SolverSettings {
        SolverSettings {
            kind: self.solver.into(),
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct BlendArgs {
    #[arg(long)]
    noise: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Prompt for the inpaint step (defaults to --prompt).
    #[arg(long)]
    inpaint_prompt: Option<String>,
    /// `stub`, `identity` or `exec:"CMD"`.
    #[arg(long, env = "BNMUSIC_BACKEND", default_value = "stub")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_NOISE_TARGET_LUFS, allow_hyphen_values = true)]
    target_lufs: f64,
    #[arg(long, default_value_t = DEFAULT_DYNAMIC_RANGE_DB)]
    dynamic_range: f64,
    #[arg(long, default_value_t = DEFAULT_GL_ITERS)]
    gl_iters: usize,
    #[arg(long, default_value_t = DEFAULT_GL_MOMENTUM)]
    gl_momentum: f64,
    #[arg(long, default_value_t = 1)]
    outpaint_passes: usize,
    #[arg(long, default_value_t = 1)]
    inpaint_passes: usize,
    #[arg(long, default_value_t = 0)]
    inpaint_dilation: usize,
    /// Seconds to wait for each backend response.
    #[arg(long, default_value_t = 120.0)]
    backend_timeout: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    spectral: SpectralArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    noise: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CORE_FRACTION)]
    core_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_SMR_DB, allow_hyphen_values = true)]
    smr_db: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_TARGET_LUFS, allow_hyphen_values = true)]
    target_lufs: f64,
    #[arg(long, default_value_t = DEFAULT_DYNAMIC_RANGE_DB)]
    dynamic_range: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    spectral: SpectralArgs,
}

#[derive(Args)]
struct AmplifyArgs {
    #[arg(long)]
    music: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DYNAMIC_RANGE_DB)]
    dynamic_range: f64,
    /// Also write the amplified music, reconstructed with Griffin-Lim.
    #[arg(long)]
    out_wav: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GL_ITERS)]
    gl_iters: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    spectral: SpectralArgs,
}

#[derive(Args)]
struct MixArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clip out-of-range samples instead of failing.
    #[arg(long)]
    clip: bool,
}

#[derive(Args)]
struct LoudnessArgs {
    input: PathBuf,
    /// Normalize to this loudness and write the result to --out.
    #[arg(long, allow_hyphen_values = true, requires = "out")]
    target: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    music: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    /// Comma-separated music loudness targets.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-24,-21,-18,-15,-12,-9,-6,-3"
    )]
    targets: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_CORE_FRACTION)]
    core_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_SMR_DB, allow_hyphen_values = true)]
    smr_db: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    spectral: SpectralArgs,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    spectral: SpectralArgs,
}

#[derive(Args)]
struct ServeStubArgs {
    #[arg(long, default_value_t = 0.0)]
    f_min: f64,
    #[arg(long, default_value_t = 10_000.0)]
    f_max: f64,
}

/// Error with the category that decides the exit code.
struct Failure {
    category: Category,
    error: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            category: e.category(),
            error: e.into(),
        }
    }
}

impl From<AudioError> for Failure {
    fn from(e: AudioError) -> Self {
        PipelineError::from(e).into()
    }
}

fn fail(category: Category, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        category,
        error: error.into(),
    }
}

type CmdResult = Result<(), Failure>;

/// Prints `value` as JSON, or `human` otherwise.
fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> CmdResult {
    let mut out = io::stdout().lock();
    let text = if json {
        serde_json::to_string_pretty(value).map_err(|e| fail(Category::Io, e))?
    } else {
        human()
    };
    writeln!(out, "{text}").map_err(|e| fail(Category::Io, e))
}

fn read_input(path: &Path) -> Result<AudioClip, Failure> {
    let clip = read_wav(path)?;
    clip.require_non_empty()?;
    Ok(clip)
}

fn make_backend(
    spec: &BackendSpec,
    cfg: &SpectralConfig,
    timeout: Duration,
) -> Result<Box<dyn GeneratorBackend>, Failure> {
    Ok(match spec {
        BackendSpec::Stub => Box::new(StubBackend {
            f_min: cfg.f_min,
            f_max: cfg.f_max,
        }),
        BackendSpec::Identity => Box::new(IdentityBackend),
        BackendSpec::Exec(cmd) => Box::new(SubprocessBackend::new(cmd, timeout).map_err(PipelineError::from)?),
    })
}

fn cmd_blend(args: BlendArgs, json: bool) -> CmdResult {
    let backend: BackendSpec = args
        .backend
        .parse()
        .map_err(|e: String| fail(Category::Input, anyhow::anyhow!(e)))?;
    let spectral = args.spectral.config();
    let cfg = BlendConfig {
        prompt: args.prompt,
        seed: args.seed,
        backend: backend.clone(),
        alpha: args.solver.alpha,
        smr_db: args.solver.smr_db,
        core_fraction: args.solver.core_fraction,
        target_lufs_noise: args.target_lufs,
        dynamic_range_db: args.dynamic_range,
        solver: args.solver.settings(),
        griffin_lim_iters: args.gl_iters,
        griffin_lim_momentum: args.gl_momentum,
        stage_one: StageOneOptions {
            outpaint_passes: args.outpaint_passes,
            inpaint_passes: args.inpaint_passes,
            inpaint_dilation: args.inpaint_dilation,
            inpaint_prompt: args.inpaint_prompt,
        },
        allow_resample: args.spectral.resample,
        spectral,
    };
    cfg.validate()?;
    let noise = read_input(&args.noise)?;
    if !(args.backend_timeout.is_finite() && args.backend_timeout > 0.0) {
        return Err(fail(
            Category::Input,
            anyhow::anyhow!("backend timeout must be positive"),
        ));
    }
    let mut backend = make_backend(&backend, &cfg.spectral, Duration::from_secs_f64(args.backend_timeout))?;
    let outcome = run_blend(&noise, &cfg, backend.as_mut(), &args.out)?;
    let r = &outcome.report;
    emit(json, r, || {
        format!(
            "lambda* = {:.4}\ncoverage {:.4} -> {:.4}\nresidual deficit {:.4e} -> {:.4e}\nloudness: noise {}, music {}, mix {}\nreport: {}",
            r.lambda_star,
            r.coverage_before,
            r.coverage_after,
            r.residual_deficit_before,
            r.residual_deficit_after,
            r.loudness.noise,
            r.loudness.music,
            r.loudness.mix,
            outcome.report_path.display()
        )
    })
}

fn cmd_analyze(args: AnalyzeArgs, json: bool) -> CmdResult {
    let noise = read_input(&args.noise)?;
    let settings = NoiseSettings {
        target_lufs: Some(args.target_lufs),
        core_fraction: args.core_fraction,
        dynamic_range_db: args.dynamic_range,
        allow_resample: args.spectral.resample,
    };
    let summary = analyze(&noise, &args.spectral.config(), &settings, args.smr_db, &args.out)?;
    let stats_path = args.out.join("thresholds.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| fail(Category::Io, e))?;
    std::fs::write(&stats_path, text + "\n").map_err(|e| {
        fail(
            Category::Io,
            anyhow::anyhow!("cannot write {}: {e}", stats_path.display()),
        )
    })?;
    emit(json, &summary, || {
        format!(
            "core cells {} of {}x{}\nthresholds dB min {:.2} median {:.2} max {:.2}\nwrote {}",
            summary.core_count,
            summary.width,
            summary.height,
            summary.thresholds.min_db,
            summary.thresholds.median_db,
            summary.thresholds.max_db,
            args.out.display()
        )
    })
}

#[derive(Serialize)]
struct AmplifyOutput {
    lambda_star: f64,
    objective_value: f64,
    iterations: usize,
    solver: SolverKind,
    core_count: usize,
    coverage_before: f64,
    coverage_after: f64,
    residual_deficit_before: f64,
    residual_deficit_after: f64,
    unmaskable_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_wav: Option<PathBuf>,
}

/// Always prints JSON: the result is a machine-readable record either way.
fn cmd_amplify(args: AmplifyArgs) -> CmdResult {
    let cfg = args.spectral.config();
    let spectral = Spectral::new(&cfg).map_err(PipelineError::from)?;
    let music = conform_rate(read_input(&args.music)?, cfg.sample_rate, args.spectral.resample)?;
    let noise = read_input(&args.noise)?;
    let noise = conform_rate(noise, cfg.sample_rate, args.spectral.resample)?;
    if music.len() != noise.len() {
        return Err(AudioError::LengthMismatch {
            left: music.len(),
            right: noise.len(),
        }
        .into());
    }
    let settings = NoiseSettings {
        target_lufs: None,
        core_fraction: args.solver.core_fraction,
        dynamic_range_db: args.dynamic_range,
        allow_resample: false,
    };
    let analysis = prepare_noise(&noise, &spectral, &settings)?;
    let (music, _) = fit_length(&music, cfg.canonical_len());
    let music_mel = spectral.mel_spectrogram(&music).map_err(PipelineError::from)?;
    let amp = stage_two(
        &spectral,
        &analysis.stft,
        &music_mel,
        &analysis.mask,
        args.solver.alpha,
        args.solver.smr_db,
        &args.solver.settings(),
    )?;
    if let Some(path) = &args.out_wav {
        let audio = reconstruct(&spectral, &amp.amplified, args.gl_iters, DEFAULT_GL_MOMENTUM)?;
        write_wav(&audio, path, true)?;
    }
    let out = AmplifyOutput {
        lambda_star: amp.solution.lambda_star,
        objective_value: amp.solution.objective_value,
        iterations: amp.solution.iterations,
        solver: amp.solution.solver,
        core_count: analysis.mask.core_count(),
        coverage_before: amp.coverage_before,
        coverage_after: amp.coverage_after,
        residual_deficit_before: amp.deficit_before,
        residual_deficit_after: amp.deficit_after,
        unmaskable_count: amp.solution.unmaskable_count,
        out_wav: args.out_wav,
    };
    emit(true, &out, String::new)
}

fn cmd_mix(args: MixArgs, json: bool) -> CmdResult {
    let a = read_input(&args.a)?;
    let b = read_input(&args.b)?;
    let mixed = mix(&a, &b)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_wav(&mixed, &args.out, args.clip)?;
    let out = json!({
        "out": args.out,
        "samples": mixed.len(),
        "peak": mixed.peak(),
        "overflow": mixed.overflowed(),
    });
    emit(json, &out, || {
        format!(
            "wrote {} (peak {:.4}{})",
            args.out.display(),
            mixed.peak(),
            if mixed.overflowed() { ", clipped" } else { "" }
        )
    })
}

fn cmd_loudness(args: LoudnessArgs, json: bool) -> CmdResult {
    let clip = read_input(&args.input)?;
    let measured = measure_lufs(&clip).map_err(PipelineError::from)?;
    let mut out = json!({ "input": args.input, "measurement": measured });
    if let (Some(target), Some(path)) = (args.target, &args.out) {
        let n = normalize_lufs(&clip, target).map_err(PipelineError::from)?;
        write_wav(&n.clip, path, true)?;
        out["normalized"] = json!({
            "out": path,
            "target_lufs": target,
            "gain_db": n.gain_db,
            "measured_lufs": n.measured_after,
        });
    }
    emit(json, &out, || {
        format!("{}: {}", args.input.display(), measured.integrated_lufs)
    })
}

fn cmd_sweep(args: SweepArgs, json: bool) -> CmdResult {
    let cfg = args.spectral.config();
    let music = conform_rate(read_input(&args.music)?, cfg.sample_rate, args.spectral.resample)?;
    let noise = conform_rate(read_input(&args.noise)?, cfg.sample_rate, args.spectral.resample)?;
    let settings = SweepSettings {
        spectral: cfg,
        core_fraction: args.core_fraction,
        smr_db: args.smr_db,
        ..Default::default()
    };
    let rows = loudness_sweep(&music, &noise, &args.targets, &settings).map_err(PipelineError::from)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_sweep_csv(&rows, &args.out).map_err(PipelineError::from)?;
    emit(json, &json!({ "out": args.out, "rows": rows }), || {
        format!("wrote {} rows to {}", rows.len(), args.out.display())
    })
}

fn cmd_fixtures(args: FixturesArgs, json: bool) -> CmdResult {
    let cfg = args.spectral.config();
    cfg.validate().map_err(PipelineError::from)?;
    ensure_dir(&args.out)?;
    let mut written = Vec::new();
    for f in Fixture::ALL {
        let path = args.out.join(format!("{}.wav", f.name()));
        write_wav(
            &f.generate(cfg.canonical_len(), cfg.sample_rate, args.seed),
            &path,
            false,
        )?;
        info!("wrote {}", path.display());
        written.push(path);
    }
    emit(json, &json!({ "fixtures": written }), || {
        written
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join("\n")
    })
}

fn cmd_serve_stub(args: ServeStubArgs) -> CmdResult {
    let mut backend = StubBackend {
        f_min: args.f_min,
        f_max: args.f_max,
    };
    serve(io::stdin().lock(), io::stdout().lock(), &mut backend).map_err(|e| fail(Category::Io, e))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let json = cli.json;
    let result = match cli.command {
        Command::Blend(a) => cmd_blend(a, json),
        Command::Analyze(a) => cmd_analyze(a, json),
        Command::Amplify(a) => cmd_amplify(a),
        Command::Mix(a) => cmd_mix(a, json),
        Command::Loudness(a) => cmd_loudness(a, json),
        Command::Sweep(a) => cmd_sweep(a, json),
        Command::Fixtures(a) => cmd_fixtures(a, json),
        Command::ServeStub(a) => cmd_serve_stub(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let detail = format!("{}", f.error).replace('\n', " | ");
            eprintln!("error[{}]: {detail}", f.category.name());
            ExitCode::from(f.category.exit_code() as u8)
        }
    }
}
