//! JSON-lines wire format shared by the subprocess client and `serve`.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{GenError, GeneratorBackend, GeneratorRequest, Mode};
use crate::specimage::{ImageMapping, KeepRegion, SpecImage};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub version: u32,
    pub mode: Mode,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub out: PathBuf,
}

/// Exactly one of `image` and `error` is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireResponse {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    pub fn ok(image: PathBuf) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            image: Some(image),
            error: None,
        }
    }

    pub fn err(message: impl Into<String>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            image: None,
            error: Some(message.into()),
        }
    }

    /// Parses one response line into the image path or a typed error.
    pub fn parse(line: &str) -> Result<PathBuf, GenError> {
        let resp: WireResponse =
            serde_json::from_str(line.trim()).map_err(|e| GenError::Protocol(format!("{e}: {:?}", line.trim())))?;
        if resp.version != PROTOCOL_VERSION {
            return Err(GenError::Protocol(format!("unsupported version {}", resp.version)));
        }
        match (resp.image, resp.error) {
            (Some(path), None) => Ok(path),
            (None, Some(message)) => Err(GenError::Remote(message)),
            _ => Err(GenError::Protocol(
                "response must carry exactly one of image or error".into(),
            )),
        }
    }
}

fn handle(line: &str, backend: &mut dyn GeneratorBackend) -> Result<PathBuf, GenError> {
    let wire: WireRequest = serde_json::from_str(line).map_err(|e| GenError::Protocol(e.to_string()))?;
    if wire.version != PROTOCOL_VERSION {
        return Err(GenError::Protocol(format!("unsupported version {}", wire.version)));
    }
    let mapping = ImageMapping::default();
    let req = GeneratorRequest {
        mode: wire.mode,
        image: SpecImage::read_png(&wire.image, mapping)?,
        keep: KeepRegion::read_png(&wire.mask)?,
        prompt: wire.prompt,
        seed: wire.seed,
    };
    req.validate()?;
    let resp = backend.generate(&req)?;
    resp.image.write_png(&wire.out)?;
    Ok(wire.out)
}

/// Serves requests line by line until end of input. A bad request yields an
/// error response and the loop continues.
pub fn serve(
    input: impl BufRead,
    mut output: impl Write,
    backend: &mut dyn GeneratorBackend,
) -> std::io::Result<usize> {
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match handle(&line, backend) {
            Ok(path) => WireResponse::ok(path),
            Err(e) => {
                warn!("request failed: {e}");
                WireResponse::err(e.to_string())
            }
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
        served += 1;
    }
    Ok(served)
}
