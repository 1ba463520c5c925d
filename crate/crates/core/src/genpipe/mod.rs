//! Stage one: outpaint around the noise core, then inpaint the core.
//!
//! Generation is delegated to a [`GeneratorBackend`]. Whatever the backend
//! returns, the pipeline re-imposes the kept cells by compositing, so the
//! core after the first step and the kept complement after the second are
//! bit-identical to their sources.

mod protocol;
mod stub;
mod subprocess;

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specimage::{apply_mask, composite_keep, BinaryMask, ImageError, Keep, KeepRegion, SpecImage};

pub use protocol::{serve, WireRequest, WireResponse, PROTOCOL_VERSION};
pub use stub::{stub_generate, StubBackend};
pub use subprocess::{SubprocessBackend, DEFAULT_TIMEOUT};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator request: {0}")]
    InvalidRequest(String),
    #[error("backend returned {got:?} but {expected:?} was requested (frames x bands)")]
    Dimensions {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("cannot launch backend `{cmd}`: {detail}")]
    Spawn { cmd: String, detail: String },
    #[error("backend exited with {status}; stderr tail:\n{stderr}")]
    Exited { status: String, stderr: String },
    #[error("backend timed out after {secs:.1} s")]
    Timeout { secs: f64 },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend reported an error: {0}")]
    Remote(String),
    #[error("backend I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Outpaint,
    Inpaint,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Outpaint => "outpaint",
            Mode::Inpaint => "inpaint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorRequest {
    pub mode: Mode,
    pub image: SpecImage,
    /// Cells the backend must leave alone (rendered as 255 on the wire).
    pub keep: KeepRegion,
    pub prompt: String,
    pub seed: u64,
}

impl GeneratorRequest {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.image.dims() != self.keep.dims() {
            return Err(GenError::InvalidRequest(format!(
                "image {:?} and mask {:?} differ",
                self.image.dims(),
                self.keep.dims()
            )));
        }
        if self.prompt.trim().is_empty() {
            return Err(GenError::InvalidRequest("prompt is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorResponse {
    pub image: SpecImage,
}

pub trait GeneratorBackend {
    fn id(&self) -> String;
    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GenError>;
}

/// Returns the request image unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl GeneratorBackend for IdentityBackend {
    fn id(&self) -> String {
        "identity".into()
    }

    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GenError> {
        Ok(GeneratorResponse {
            image: req.image.clone(),
        })
    }
}

/// Backend selection as given on the command line or in `BNMUSIC_BACKEND`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendSpec {
    Stub,
    Identity,
    Exec(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "stub" => Ok(Self::Stub),
            "identity" => Ok(Self::Identity),
            other => match other.strip_prefix("exec:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(Self::Exec(cmd.trim().to_string())),
                _ => Err(format!("unknown backend `{s}`; expected stub, identity or exec:CMD")),
            },
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Stub => f.write_str("stub"),
            Self::Identity => f.write_str("identity"),
            Self::Exec(cmd) => write!(f, "exec:{cmd}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneOptions {
    pub outpaint_passes: usize,
    pub inpaint_passes: usize,
    /// Cells by which the core is grown before it becomes the inpaint
    /// generate-region.
    pub inpaint_dilation: usize,
    /// Prompt for the inpaint step; the main prompt is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpaint_prompt: Option<String>,
}

impl Default for StageOneOptions {
    fn default() -> Self {
        Self {
            outpaint_passes: 1,
            inpaint_passes: 1,
            inpaint_dilation: 0,
            inpaint_prompt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOneResult {
    pub x_mid: SpecImage,
    pub x_music: SpecImage,
    pub mask: BinaryMask,
    /// Region held fixed during inpainting.
    pub inpaint_keep: KeepRegion,
    pub prompt: String,
    pub seed: u64,
    pub backend_id: String,
}

/// One generation step: `passes` requests sharing a keep region.
struct Step<'a> {
    mode: Mode,
    keep: &'a KeepRegion,
    prompt: &'a str,
    seed: u64,
    passes: usize,
}

fn run_step(
    backend: &mut dyn GeneratorBackend,
    step: Step<'_>,
    start: SpecImage,
    source: &SpecImage,
) -> Result<SpecImage, GenError> {
    let Step {
        mode,
        keep,
        prompt,
        seed,
        passes,
    } = step;
    let mut current = start;
    for pass in 0..passes {
        let req = GeneratorRequest {
            mode,
            image: current.clone(),
            keep: keep.clone(),
            prompt: prompt.to_string(),
            seed: seed.wrapping_add(pass as u64),
        };
        req.validate()?;
        let resp = backend.generate(&req)?;
        if resp.image.dims() != req.image.dims() {
            return Err(GenError::Dimensions {
                expected: req.image.dims(),
                got: resp.image.dims(),
            });
        }
        current = composite_keep(&resp.image, source, keep)?;
        info!("{mode} pass {} of {passes} done", pass + 1);
    }
    Ok(current)
}

/// Runs the outpaint then inpaint steps and composites after each.
pub fn stage_one(
    noise_img: &SpecImage,
    mask: &BinaryMask,
    prompt: &str,
    seed: u64,
    backend: &mut dyn GeneratorBackend,
    options: &StageOneOptions,
) -> Result<StageOneResult, GenError> {
    if noise_img.dims() != mask.dims() {
        return Err(GenError::InvalidRequest(format!(
            "image {:?} and mask {:?} differ",
            noise_img.dims(),
            mask.dims()
        )));
    }
    let core_keep = mask.keep_region(Keep::Core);
    let masked = apply_mask(noise_img, mask, Keep::Core)?;
    let outpaint = Step {
        mode: Mode::Outpaint,
        keep: &core_keep,
        prompt,
        seed,
        passes: options.outpaint_passes,
    };
    let x_mid = run_step(backend, outpaint, masked, noise_img)?;

    let inpaint_keep = mask.dilated(options.inpaint_dilation).keep_region(Keep::Complement);
    let inpaint_prompt = options.inpaint_prompt.as_deref().unwrap_or(prompt);
    let inpaint = Step {
        mode: Mode::Inpaint,
        keep: &inpaint_keep,
        prompt: inpaint_prompt,
        seed,
        passes: options.inpaint_passes,
    };
    let x_music = run_step(backend, inpaint, x_mid.clone(), &x_mid)?;
    Ok(StageOneResult {
        x_mid,
        x_music,
        mask: mask.clone(),
        inpaint_keep,
        prompt: prompt.to_string(),
        seed,
        backend_id: backend.id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specimage::{extract_core_mask, ImageMapping, SILENT_PIXEL};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, bands: usize, frames: usize) -> SpecImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpecImage::new(
            Array2::from_shape_fn((bands, frames), |_| rng.gen()),
            ImageMapping::default(),
        )
    }

    fn check_invariants(noise: &SpecImage, r: &StageOneResult) {
        for ((idx, &core), (&n, &mid)) in r
            .mask
            .cells()
            .indexed_iter()
            .zip(noise.pixels().iter().zip(r.x_mid.pixels().iter()))
        {
            if core {
                assert_eq!(n, mid, "core cell {idx:?} changed in x_mid");
            }
        }
        for ((&keep, &mid), &music) in r
            .inpaint_keep
            .0
            .iter()
            .zip(r.x_mid.pixels().iter())
            .zip(r.x_music.pixels().iter())
        {
            if keep {
                assert_eq!(mid, music);
            }
        }
    }

    #[test]
    fn identity_backend_keeps_masked_fill() {
        let noise = random_image(1, 24, 40);
        let mask = extract_core_mask(&noise, 0.15).unwrap();
        let r = stage_one(
            &noise,
            &mask,
            "calm piano",
            3,
            &mut IdentityBackend,
            &Default::default(),
        )
        .unwrap();
        check_invariants(&noise, &r);
        let expected = apply_mask(&noise, &mask, Keep::Core).unwrap();
        assert_eq!(r.x_music, expected);
        assert_eq!(r.backend_id, "identity");
    }

    #[test]
    fn stub_backend_preserves_and_is_deterministic() {
        let noise = random_image(2, 32, 64);
        let mask = extract_core_mask(&noise, 0.2).unwrap();
        let run = || {
            stage_one(
                &noise,
                &mask,
                "jazz",
                11,
                &mut StubBackend::default(),
                &Default::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        check_invariants(&noise, &a);
        assert_eq!(a.x_music, b.x_music);
        assert_ne!(a.x_music, a.x_mid);
    }

    #[test]
    fn dilation_widens_generate_region() {
        let noise = random_image(3, 32, 48);
        let mask = extract_core_mask(&noise, 0.1).unwrap();
        let opts = StageOneOptions {
            inpaint_dilation: 2,
            ..Default::default()
        };
        let r = stage_one(&noise, &mask, "x", 0, &mut StubBackend::default(), &opts).unwrap();
        check_invariants(&noise, &r);
        assert!(r.inpaint_keep.kept_count() < mask.keep_region(Keep::Complement).kept_count());
    }

    #[test]
    fn reordered_steps_differ() {
        let noise = random_image(4, 32, 64);
        let mask = extract_core_mask(&noise, 0.15).unwrap();
        let forward = stage_one(&noise, &mask, "p", 5, &mut StubBackend::default(), &Default::default()).unwrap();
        // Inpaint first (keep complement), then outpaint (keep core).
        let mut stub = StubBackend::default();
        let comp = mask.keep_region(Keep::Complement);
        let core = mask.keep_region(Keep::Core);
        let step = |mode, keep| Step {
            mode,
            keep,
            prompt: "p",
            seed: 5,
            passes: 1,
        };
        let start = apply_mask(&noise, &mask, Keep::Complement).unwrap();
        let first = run_step(&mut stub, step(Mode::Inpaint, &comp), start, &noise).unwrap();
        let second = run_step(&mut stub, step(Mode::Outpaint, &core), first.clone(), &first).unwrap();
        assert_ne!(second, forward.x_music);
    }

    struct Shrinking;
    impl GeneratorBackend for Shrinking {
        fn id(&self) -> String {
            "shrinking".into()
        }
        fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GenError> {
            let (w, h) = req.image.dims();
            Ok(GeneratorResponse {
                image: SpecImage::filled(h, w - 1, SILENT_PIXEL, req.image.mapping()),
            })
        }
    }

    #[test]
    fn wrong_size_response_is_rejected() {
        let noise = random_image(5, 8, 8);
        let mask = extract_core_mask(&noise, 0.25).unwrap();
        let err = stage_one(&noise, &mask, "p", 0, &mut Shrinking, &Default::default()).unwrap_err();
        assert!(
            matches!(
                err,
                GenError::Dimensions {
                    expected: (8, 8),
                    got: (7, 8)
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let noise = random_image(6, 8, 8);
        let mask = extract_core_mask(&noise, 0.25).unwrap();
        assert!(matches!(
            stage_one(&noise, &mask, "  ", 0, &mut IdentityBackend, &Default::default()),
            Err(GenError::InvalidRequest(_))
        ));
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!("stub".parse::<BackendSpec>().unwrap(), BackendSpec::Stub);
        assert_eq!(
            "exec:python3 serve.py --mock".parse::<BackendSpec>().unwrap(),
            BackendSpec::Exec("python3 serve.py --mock".into())
        );
        assert!("exec:".parse::<BackendSpec>().is_err());
        assert!("gpu".parse::<BackendSpec>().is_err());
        assert_eq!(BackendSpec::Exec("a b".into()).to_string(), "exec:a b");
    }
}
