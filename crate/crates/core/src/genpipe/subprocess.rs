//! Client for an external generator process speaking the JSON-lines protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};
use tempfile::TempDir;
use wait_timeout::ChildExt;

use super::protocol::{WireRequest, WireResponse, PROTOCOL_VERSION};
use super::{GenError, GeneratorBackend, GeneratorRequest, GeneratorResponse};
use crate::specimage::SpecImage;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
const STDERR_TAIL_LINES: usize = 20;
const EXIT_GRACE: Duration = Duration::from_secs(5);

struct Running {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<Vec<u8>>>,
    stderr_thread: Option<JoinHandle<()>>,
}

impl Running {
    fn stderr_tail(&mut self) -> String {
        if let Some(handle) = self.stderr_thread.take() {
            let _ = handle.join();
        }
        let buf = self.stderr.lock().map(|b| b.clone()).unwrap_or_default();
        let text = String::from_utf8_lossy(&buf);
        let lines: Vec<&str> = text.lines().collect();
        lines[lines.len().saturating_sub(STDERR_TAIL_LINES)..].join("\n")
    }

    /// Waits for an exited child and packages its status with stderr.
    fn exit_error(mut self) -> GenError {
        self.stdin.take();
        let status = match self.child.wait_timeout(EXIT_GRACE) {
            Ok(Some(status)) => status.to_string(),
            _ => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                "no exit status (killed)".to_string()
            }
        };
        GenError::Exited {
            status,
            stderr: self.stderr_tail(),
        }
    }

    fn shutdown(mut self) {
        self.stdin.take();
        match self.child.wait_timeout(EXIT_GRACE) {
            Ok(Some(_)) => {}
            _ => {
                let _ = self.child.kill();
                let _ = self.child.wait();
            }
        }
    }
}

/// Spawns the command once and keeps it alive across requests. Request and
/// response PNGs live in a private temporary directory.
pub struct SubprocessBackend {
    cmd: String,
    argv: Vec<String>,
    timeout: Duration,
    workspace: TempDir,
    counter: usize,
    running: Option<Running>,
}

impl SubprocessBackend {
    pub fn new(cmd: &str, timeout: Duration) -> Result<Self, GenError> {
        let argv = shell_words::split(cmd).map_err(|e| GenError::Spawn {
            cmd: cmd.to_string(),
            detail: e.to_string(),
        })?;
        if argv.is_empty() {
            return Err(GenError::Spawn {
                cmd: cmd.to_string(),
                detail: "empty command".into(),
            });
        }
        Ok(Self {
            cmd: cmd.to_string(),
            argv,
            timeout,
            workspace: tempfile::Builder::new().prefix("bnmusic-gen-").tempdir()?,
            counter: 0,
            running: None,
        })
    }

    fn spawn(&self) -> Result<Running, GenError> {
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| GenError::Spawn {
                cmd: self.cmd.clone(),
                detail: e.to_string(),
            })?;
        debug!("spawned backend `{}` (pid {})", self.cmd, child.id());
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr_pipe = child.stderr.take().expect("stderr is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&stderr);
        let stderr_thread = thread::spawn(move || {
            let mut chunk = [0u8; 4096];
            while let Ok(n) = stderr_pipe.read(&mut chunk) {
                if n == 0 {
                    break;
                }
                if let Ok(mut buf) = sink.lock() {
                    buf.extend_from_slice(&chunk[..n]);
                }
            }
        });
        Ok(Running {
            child,
            stdin,
            lines,
            stderr,
            stderr_thread: Some(stderr_thread),
        })
    }

    fn exchange(&mut self, line: &str) -> Result<String, GenError> {
        let mut running = match self.running.take() {
            Some(r) => r,
            None => self.spawn()?,
        };
        let sent = running
            .stdin
            .as_mut()
            .map(|stdin| {
                stdin
                    .write_all(line.as_bytes())
                    .and_then(|_| stdin.write_all(b"\n"))
                    .and_then(|_| stdin.flush())
            })
            .unwrap_or_else(|| Err(std::io::ErrorKind::BrokenPipe.into()));
        if let Err(e) = sent {
            warn!("writing to backend failed: {e}");
            return Err(running.exit_error());
        }
        match running.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => {
                self.running = Some(running);
                Ok(reply)
            }
            Ok(Err(e)) => {
                running.shutdown();
                Err(GenError::Io(e))
            }
            Err(RecvTimeoutError::Timeout) => {
                let _ = running.child.kill();
                running.shutdown();
                Err(GenError::Timeout {
                    secs: self.timeout.as_secs_f64(),
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(running.exit_error()),
        }
    }
}

impl GeneratorBackend for SubprocessBackend {
    fn id(&self) -> String {
        format!("exec:{}", self.cmd)
    }

    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GenError> {
        req.validate()?;
        self.counter += 1;
        let dir = self.workspace.path();
        let stem = format!("{:04}-{}", self.counter, req.mode);
        let image = dir.join(format!("{stem}-image.png"));
        let mask = dir.join(format!("{stem}-mask.png"));
        let out = dir.join(format!("{stem}-out.png"));
        req.image.write_png(&image)?;
        req.keep.write_png(&mask)?;
        let wire = WireRequest {
            version: PROTOCOL_VERSION,
            mode: req.mode,
            image,
            mask,
            prompt: req.prompt.clone(),
            seed: req.seed,
            out,
        };
        let line = serde_json::to_string(&wire).map_err(|e| GenError::Protocol(e.to_string()))?;
        let reply = self.exchange(&line)?;
        let path = WireResponse::parse(&reply)?;
        let image = SpecImage::read_png(&path, req.image.mapping())?;
        if image.dims() != req.image.dims() {
            return Err(GenError::Dimensions {
                expected: req.image.dims(),
                got: image.dims(),
            });
        }
        Ok(GeneratorResponse { image })
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        if let Some(running) = self.running.take() {
            running.shutdown();
        }
    }
}
