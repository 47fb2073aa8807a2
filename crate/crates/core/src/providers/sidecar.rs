//! Client for an external inference process speaking the framed protocol.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde_json::{json, Value};

use super::frame::{f32s_to_le, le_to_f32s, read_message, write_message, Message};
use super::{FeatureExtractor, FeatureSet, ImageSegmenter, LogitMap, SegmentAux};
use crate::error::{Error, Result};
use crate::render::Image;
use crate::scene::Scene;

/// A bidirectional byte stream to the sidecar.
pub trait SidecarTransport: Read + Write {}

impl<T: Read + Write> SidecarTransport for T {}

/// The stdin/stdout pipes of a spawned sidecar.
pub struct ChildPipes {
    child: Child,
    stdin: ChildStdin,
    stdout: ChildStdout,
}

impl Read for ChildPipes {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.stdout.read(buf)
    }
}

impl Write for ChildPipes {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.stdin.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.stdin.flush()
    }
}

impl Drop for ChildPipes {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One connection to a sidecar; requests are strictly sequential.
pub struct SidecarClient {
    stream: Box<dyn SidecarTransport + Send>,
}

impl SidecarClient {
    pub fn new(stream: impl SidecarTransport + Send + 'static) -> Self {
        Self {
            stream: Box::new(stream),
        }
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Provider(format!("cannot connect to sidecar at {addr}: {e}")))?;
        stream.set_nodelay(true)?;
        Ok(Self::new(stream))
    }

    /// Runs `cmd` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn(cmd: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Provider(format!("cannot start sidecar '{cmd}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self::new(ChildPipes { child, stdin, stdout }))
    }

    /// Sends one request and returns the successful response.
    pub fn request(&mut self, header: &Value, payload: &[u8]) -> Result<Message> {
        write_message(&mut self.stream, header, payload)
            .map_err(|e| Error::Provider(format!("sending {}: {e}", header["op"])))?;
        let resp = read_message(&mut self.stream)?;
        match resp.header.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok(resp),
            Some(false) => {
                let msg = resp.header.get("error").and_then(Value::as_str).unwrap_or("unspecified error");
                Err(Error::Provider(format!("sidecar rejected {}: {msg}", header["op"])))
            }
            None => Err(Error::Protocol(format!("response header lacks boolean 'ok': {}", resp.header))),
        }
    }

    pub fn ping(&mut self) -> Result<()> {
        self.request(&json!({"op": "ping"}), &[]).map(|_| ())
    }

    pub fn shutdown(mut self) -> Result<()> {
        write_message(&mut self.stream, &json!({"op": "shutdown"}), &[])
    }
}

fn header_usize(h: &Value, key: &str) -> Result<usize> {
    h.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Protocol(format!("response header lacks integer '{key}': {h}")))
}

impl FeatureExtractor for SidecarClient {
    fn extract_features(&mut self, scene: &Scene) -> Result<FeatureSet> {
        let n = scene.len();
        let rows: Vec<f32> = scene.packed_rows().into_iter().flatten().collect();
        let resp = self.request(&json!({"op": "features", "n": n}), &f32s_to_le(&rows))?;
        let dim = header_usize(&resp.header, "dim")?;
        if dim == 0 || resp.payload.len() != n * dim * 4 {
            return Err(Error::Protocol(format!(
                "features response declares {n}x{dim} but carries {} bytes",
                resp.payload.len()
            )));
        }
        FeatureSet::new(dim, le_to_f32s(&resp.payload)?)
    }
}

impl ImageSegmenter for SidecarClient {
    fn segment_image(&mut self, image: &Image, prompts: &[String], _aux: Option<SegmentAux<'_>>) -> Result<LogitMap> {
        let (w, h) = (image.width, image.height);
        let header = json!({"op": "segment", "w": w, "h": h, "prompts": prompts});
        let resp = self.request(&header, &image.to_rgb8())?;
        let c = header_usize(&resp.header, "c")?;
        if c != prompts.len() {
            return Err(Error::Protocol(format!("segment response has {c} classes for {} prompts", prompts.len())));
        }
        let want = w as usize * h as usize * c * 4;
        if resp.payload.len() != want {
            return Err(Error::Protocol(format!(
                "segment response declares {w}x{h}x{c} but carries {} bytes",
                resp.payload.len()
            )));
        }
        LogitMap::new(w, h, prompts.to_vec(), le_to_f32s(&resp.payload)?)
    }
}
