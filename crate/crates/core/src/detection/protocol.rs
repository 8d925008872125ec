//! Line-delimited JSON protocol spoken with out-of-process detector backends.
//!
//! ```text
//! backend → core   {"hello":{"detector_id":"frcnn","score_floor":0.5}}
//! core → backend   {"image":"a.png","labels":["cat","chair"],"perturbation":null,"request_id":"r1"}
//! backend → core   {"request_id":"r1","width":512,"height":512,"detections":[{"label":"cat","score":0.93,"box":[1.0,2.0,3.0,4.0]}]}
//!                  {"request_id":"r1","error":"..."}
//! ```
//!
//! One request is in flight per connection. Keys are emitted in the order
//! shown, so `serialize(parse(line)) == line` for canonical lines.

use std::io::{self, BufRead, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DetectionError, DetectorBackend, Perturbation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHello {
    pub detector_id: String,
    pub score_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloLine {
    pub hello: BackendHello,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image: String,
    pub labels: Vec<String>,
    pub perturbation: Option<Perturbation>,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectResponse {
    Ok { request_id: String, width: u32, height: u32, detections: Vec<WireDetection> },
    Err { request_id: String, error: String },
}

#[derive(Deserialize)]
struct ErrorHello {
    error: String,
}

/// Backend speaking the protocol over any line reader / writer pair.
pub struct LineBackend<W: Write + Send> {
    hello: BackendHello,
    writer: W,
    lines: Receiver<io::Result<String>>,
    line_no: usize,
    timeout: Duration,
}

impl<W: Write + Send> LineBackend<W> {
    /// Start reading `reader` on a helper thread and wait for the handshake.
    pub fn start<R>(reader: R, writer: W, timeout: Duration) -> Result<Self, DetectionError>
    where
        R: BufRead + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut backend = LineBackend {
            hello: BackendHello { detector_id: "<handshake>".into(), score_floor: 0.0 },
            writer,
            lines: rx,
            line_no: 0,
            timeout,
        };
        let line = backend.next_line()?;
        backend.hello = match serde_json::from_str::<HelloLine>(&line) {
            Ok(h) => h.hello,
            Err(e) => {
                if let Ok(err) = serde_json::from_str::<ErrorHello>(&line) {
                    return Err(backend.failure(format!("handshake error: {}", err.error)));
                }
                return Err(DetectionError::Protocol { line: backend.line_no, msg: format!("bad handshake: {e}") });
            }
        };
        if !(0.0..=1.0).contains(&backend.hello.score_floor) {
            return Err(DetectionError::Protocol {
                line: backend.line_no,
                msg: format!("score_floor {} outside [0,1]", backend.hello.score_floor),
            });
        }
        Ok(backend)
    }

    fn failure(&self, msg: String) -> DetectionError {
        DetectionError::Backend { detector_id: self.hello.detector_id.clone(), msg }
    }

    fn next_line(&mut self) -> Result<String, DetectionError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => {
                self.line_no += 1;
                Ok(line)
            }
            Ok(Err(e)) => Err(self.failure(format!("read error: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(self.failure(format!("timed out after {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(self.failure("backend closed its output".into())),
        }
    }
}

impl<W: Write + Send> DetectorBackend for LineBackend<W> {
    fn hello(&self) -> &BackendHello {
        &self.hello
    }

    fn detect(&mut self, request: &DetectRequest) -> Result<DetectResponse, DetectionError> {
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        if let Err(e) = self.writer.write_all(line.as_bytes()).and_then(|_| self.writer.flush()) {
            return Err(self.failure(format!("write error: {e}")));
        }
        let reply = self.next_line()?;
        serde_json::from_str(&reply)
            .map_err(|e| DetectionError::Protocol { line: self.line_no, msg: format!("malformed response: {e}") })
    }

    fn last_line(&self) -> usize {
        self.line_no
    }
}

/// A backend child process; killed when dropped.
pub struct ProcessBackend {
    child: Child,
    inner: LineBackend<ChildStdin>,
}

impl ProcessBackend {
    /// Spawn `program args...` and complete the handshake.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, DetectionError> {
        let fail = |msg: String| DetectionError::Backend { detector_id: program.to_string(), msg };
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(format!("cannot start: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = io::BufReader::new(child.stdout.take().expect("piped stdout"));
        match LineBackend::start(stdout, stdin, timeout) {
            Ok(inner) => Ok(Self { child, inner }),
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    /// Spawn from a whitespace-separated command line.
    pub fn spawn_command_line(command: &str, timeout: Duration) -> Result<Self, DetectionError> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| DetectionError::Backend {
            detector_id: "<none>".into(),
            msg: "empty backend command".into(),
        })?;
        let args: Vec<String> = parts.collect();
        Self::spawn(&program, &args, timeout)
    }
}

impl DetectorBackend for ProcessBackend {
    fn hello(&self) -> &BackendHello {
        self.inner.hello()
    }

    fn detect(&mut self, request: &DetectRequest) -> Result<DetectResponse, DetectionError> {
        self.inner.detect(request)
    }

    fn last_line(&self) -> usize {
        self.inner.last_line()
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
