//! The boundary to the image translation network.
//!
//! Translators turn a partially textured panorama into a fully textured one.
//! Besides the in-process stand-ins ([`Identity`], [`TintStub`]) an external
//! program can be plugged in through a framed stdio protocol:
//!
//! ```text
//! u32 little-endian header length
//! UTF-8 JSON header {"w": .., "h": .., "c": .., "kind": "request"|"response"|"error"}
//! payload: request  -> w*h*c pixel bytes, then w*h mask bytes (0 or 1)
//!          response -> w*h*3 pixel bytes
//!          error    -> empty; the header carries "message"
//! ```
//!
//! Pixels are row-major. With `c = 4` each request pixel is
//! `[gray, r, g, b]`: the white-material rendering followed by the existing
//! texture (zero where the mask is 0).

use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pano::PanoFrame;

const MAX_HEADER_LEN: u32 = 64 * 1024;
const MAX_PIXELS: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("unexpected frame kind `{0}`")]
    UnexpectedKind(&'static str),
    #[error("handler failed: {0}")]
    Handler(String),
}

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("translator expects {expected:?}, frame is {got:?}")]
    Dimension { expected: (u32, u32), got: (u32, u32) },
    #[error("transport: {0}")]
    Transport(String),
    #[error("translator reported: {0}")]
    Remote(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// A translation failure tagged with the pipeline iteration that hit it.
#[derive(Debug, Error)]
#[error("iteration {iteration}: {source}")]
pub struct TranslationFailure {
    pub iteration: usize,
    #[source]
    pub source: TranslateError,
}

/// How the partially textured rendering is packed for the translator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Gray and textured surfaces merged into one RGB image.
    #[default]
    Merged,
    /// Gray rendering and existing texture as separate planes.
    FourChannel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslatorRequest {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub pixels: Vec<u8>,
    pub mask: Vec<u8>,
}

impl TranslatorRequest {
    pub fn from_frame(frame: &PanoFrame, mode: InputMode) -> Self {
        let rgb = frame.to_rgb8().into_raw();
        let mask: Vec<u8> = frame.mask.iter().map(|&m| u8::from(m != 0)).collect();
        let (channels, pixels) = match mode {
            InputMode::Merged => (3, rgb),
            InputMode::FourChannel => {
                let gray = frame.gray8();
                let mut px = Vec::with_capacity(gray.len() * 4);
                for (i, g) in gray.iter().enumerate() {
                    px.push(*g);
                    if mask[i] != 0 {
                        px.extend_from_slice(&rgb[3 * i..3 * i + 3]);
                    } else {
                        px.extend_from_slice(&[0, 0, 0]);
                    }
                }
                (4, px)
            }
        };
        Self {
            width: frame.width,
            height: frame.height,
            channels,
            pixels,
            mask,
        }
    }

    fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// The merged 3-channel view of the request: texture where masked,
    /// gray elsewhere.
    pub fn merged_rgb(&self) -> Vec<u8> {
        match self.channels {
            3 => self.pixels.clone(),
            _ => {
                let mut out = Vec::with_capacity(self.pixel_count() * 3);
                for (i, px) in self.pixels.chunks_exact(4).enumerate() {
                    if self.mask[i] != 0 {
                        out.extend_from_slice(&px[1..4]);
                    } else {
                        out.extend_from_slice(&[px[0]; 3]);
                    }
                }
                out
            }
        }
    }

    /// Gray level of the white-material rendering at pixel `i`.
    fn gray_at(&self, i: usize) -> u8 {
        match self.channels {
            3 => self.pixels[3 * i],
            _ => self.pixels[4 * i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslatorResponse {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl TranslatorResponse {
    pub fn into_image(self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels).expect("validated payload")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FrameKind {
    Request,
    Response,
    Error,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameHeader {
    w: u32,
    h: u32,
    c: u32,
    kind: FrameKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Request(TranslatorRequest),
    Response(TranslatorResponse),
    Error(String),
}

impl Frame {
    fn kind_name(&self) -> &'static str {
        match self {
            Frame::Request(_) => "request",
            Frame::Response(_) => "response",
            Frame::Error(_) => "error",
        }
    }
}

pub fn write_frame<W: Write>(out: &mut W, frame: &Frame) -> io::Result<()> {
    let (header, payload): (FrameHeader, Vec<&[u8]>) = match frame {
        Frame::Request(r) => (
            FrameHeader { w: r.width, h: r.height, c: r.channels, kind: FrameKind::Request, message: None },
            vec![&r.pixels, &r.mask],
        ),
        Frame::Response(r) => (
            FrameHeader { w: r.width, h: r.height, c: 3, kind: FrameKind::Response, message: None },
            vec![&r.pixels],
        ),
        Frame::Error(msg) => (
            FrameHeader { w: 0, h: 0, c: 0, kind: FrameKind::Error, message: Some(msg.clone()) },
            vec![],
        ),
    };
    let json = serde_json::to_vec(&header).map_err(io::Error::other)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for p in payload {
        out.write_all(p)?;
    }
    out.flush()
}

fn read_exact_or_truncated<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), ProtocolError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => ProtocolError::Io(e),
    })
}

/// Read one frame. `Ok(None)` means the stream ended cleanly between frames.
pub fn read_frame<R: Read>(input: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match input.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_HEADER_LEN {
        return Err(ProtocolError::Header(format!("header length {len}")));
    }
    let mut raw = vec![0u8; len as usize];
    read_exact_or_truncated(input, &mut raw)?;
    let header: FrameHeader =
        serde_json::from_slice(&raw).map_err(|e| ProtocolError::Header(e.to_string()))?;
    let pixels = header.w as u64 * header.h as u64;
    if header.kind != FrameKind::Error && (pixels == 0 || pixels > MAX_PIXELS) {
        return Err(ProtocolError::Header(format!("bad dimensions {}x{}", header.w, header.h)));
    }
    let pixels = pixels as usize;
    match header.kind {
        FrameKind::Request => {
            if header.c != 3 && header.c != 4 {
                return Err(ProtocolError::Header(format!("request with {} channels", header.c)));
            }
            let mut px = vec![0u8; pixels * header.c as usize];
            read_exact_or_truncated(input, &mut px)?;
            let mut mask = vec![0u8; pixels];
            read_exact_or_truncated(input, &mut mask)?;
            if mask.iter().any(|&m| m > 1) {
                return Err(ProtocolError::Header("mask is not binary".into()));
            }
            Ok(Some(Frame::Request(TranslatorRequest {
                width: header.w,
                height: header.h,
                channels: header.c,
                pixels: px,
                mask,
            })))
        }
        FrameKind::Response => {
            if header.c != 3 {
                return Err(ProtocolError::Header(format!("response with {} channels", header.c)));
            }
            let mut px = vec![0u8; pixels * 3];
            read_exact_or_truncated(input, &mut px)?;
            Ok(Some(Frame::Response(TranslatorResponse {
                width: header.w,
                height: header.h,
                pixels: px,
            })))
        }
        FrameKind::Error => Ok(Some(Frame::Error(header.message.unwrap_or_default()))),
    }
}

/// Answer requests from `input` on `output`, one response per request, until
/// `input` ends. Any malformed frame or handler failure is reported to the
/// peer as an error frame and ends the session with an error.
pub fn serve_protocol<R, W, F>(input: R, output: W, mut handler: F) -> Result<usize, ProtocolError>
where
    R: Read,
    W: Write,
    F: FnMut(&TranslatorRequest) -> Result<TranslatorResponse, TranslateError>,
{
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    let mut served = 0;
    loop {
        let err = match read_frame(&mut input) {
            Ok(None) => return Ok(served),
            Ok(Some(Frame::Request(req))) => match handler(&req) {
                Ok(resp) if (resp.width, resp.height) == (req.width, req.height)
                    && resp.pixels.len() == req.pixel_count() * 3 =>
                {
                    write_frame(&mut output, &Frame::Response(resp))?;
                    served += 1;
                    continue;
                }
                Ok(_) => ProtocolError::Handler("response does not match request size".into()),
                Err(e) => ProtocolError::Handler(e.to_string()),
            },
            Ok(Some(other)) => ProtocolError::UnexpectedKind(other.kind_name()),
            Err(e) => e,
        };
        let _ = write_frame(&mut output, &Frame::Error(err.to_string()));
        return Err(err);
    }
}

pub trait Translator: Send {
    fn translate_request(&mut self, request: &TranslatorRequest) -> Result<TranslatorResponse, TranslateError>;
}

impl<T: Translator + ?Sized> Translator for Box<T> {
    fn translate_request(&mut self, request: &TranslatorRequest) -> Result<TranslatorResponse, TranslateError> {
        (**self).translate_request(request)
    }
}

/// Send `frame` through `translator` and check the returned image size.
pub fn translate<T: Translator + ?Sized>(
    translator: &mut T,
    frame: &PanoFrame,
    mode: InputMode,
) -> Result<RgbImage, TranslationFailure> {
    let fail = |source| TranslationFailure { iteration: frame.viewpoint.iteration, source };
    let req = TranslatorRequest::from_frame(frame, mode);
    let resp = translator.translate_request(&req).map_err(fail)?;
    if (resp.width, resp.height) != (frame.width, frame.height)
        || resp.pixels.len() != req.pixel_count() * 3
    {
        return Err(fail(TranslateError::Dimension {
            expected: (frame.width, frame.height),
            got: (resp.width, resp.height),
        }));
    }
    Ok(resp.into_image())
}

/// Returns its input unchanged.
#[derive(Debug, Default, Clone)]
pub struct Identity;

impl Translator for Identity {
    fn translate_request(&mut self, req: &TranslatorRequest) -> Result<TranslatorResponse, TranslateError> {
        Ok(TranslatorResponse {
            width: req.width,
            height: req.height,
            pixels: req.merged_rgb(),
        })
    }
}

/// Colors untextured surfaces with a tint whose hue advances by a fixed
/// angle on every call; textured pixels pass through unchanged.
#[derive(Debug, Clone)]
pub struct TintStub {
    pub angle_deg: f64,
    calls: usize,
}

impl Default for TintStub {
    fn default() -> Self {
        Self::new(40.0)
    }
}

impl TintStub {
    pub fn new(angle_deg: f64) -> Self {
        Self { angle_deg, calls: 0 }
    }

    /// Default stub that behaves as if it had already served `calls`
    /// requests, for resuming a bake.
    pub fn after(calls: usize) -> Self {
        Self { calls, ..Self::default() }
    }

    /// Tint applied on call `k` (0-based).
    pub fn tint(&self, k: usize) -> [f64; 3] {
        hsv_to_rgb((self.angle_deg * (k + 1) as f64).rem_euclid(360.0), 0.6, 1.0)
    }
}

impl Translator for TintStub {
    fn translate_request(&mut self, req: &TranslatorRequest) -> Result<TranslatorResponse, TranslateError> {
        let tint = self.tint(self.calls);
        self.calls += 1;
        let mut pixels = req.merged_rgb();
        for i in 0..req.pixel_count() {
            if req.mask[i] == 0 {
                let g = req.gray_at(i) as f64;
                for ch in 0..3 {
                    pixels[3 * i + ch] = (g * tint[ch]).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(TranslatorResponse { width: req.width, height: req.height, pixels })
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Translator running as a child process that speaks the stdio protocol.
pub struct ExecTranslator {
    command: String,
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
}

impl fmt::Debug for ExecTranslator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecTranslator").field("command", &self.command).finish()
    }
}

impl ExecTranslator {
    /// Start `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self, TranslateError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| TranslateError::Transport(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            command: command.to_string(),
            child,
            stdin: Some(BufWriter::new(stdin)),
            stdout: BufReader::new(stdout),
        })
    }
}

impl Translator for ExecTranslator {
    fn translate_request(&mut self, req: &TranslatorRequest) -> Result<TranslatorResponse, TranslateError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| TranslateError::Transport("translator input closed".into()))?;
        write_frame(stdin, &Frame::Request(req.clone()))
            .map_err(|e| TranslateError::Transport(format!("write to translator: {e}")))?;
        match read_frame(&mut self.stdout) {
            Ok(Some(Frame::Response(r))) => Ok(r),
            Ok(Some(Frame::Error(msg))) => Err(TranslateError::Remote(msg)),
            Ok(Some(other)) => Err(ProtocolError::UnexpectedKind(other.kind_name()).into()),
            Ok(None) => Err(TranslateError::Transport("translator exited".into())),
            Err(e) => Err(TranslateError::Protocol(e)),
        }
    }
}

impl Drop for ExecTranslator {
    fn drop(&mut self) {
        // Closing stdin is the shutdown signal.
        self.stdin.take();
        let _ = self.child.wait();
    }
}

/// Which translator the pipeline uses: `identity`, `stub`, or `exec:<command>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TranslatorSpec {
    #[default]
    Identity,
    Stub,
    Exec(String),
}

impl TranslatorSpec {
    pub fn build(&self) -> Result<Box<dyn Translator>, TranslateError> {
        Ok(match self {
            TranslatorSpec::Identity => Box::new(Identity),
            TranslatorSpec::Stub => Box::new(TintStub::default()),
            TranslatorSpec::Exec(cmd) => Box::new(ExecTranslator::spawn(cmd)?),
        })
    }
}

impl FromStr for TranslatorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "stub" => Ok(Self::Stub),
            _ => match s.strip_prefix("exec:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(Self::Exec(cmd.to_string())),
                _ => Err(format!("unknown translator `{s}` (identity|stub|exec:<command>)")),
            },
        }
    }
}

impl TryFrom<String> for TranslatorSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TranslatorSpec> for String {
    fn from(s: TranslatorSpec) -> String {
        s.to_string()
    }
}

impl fmt::Display for TranslatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TranslatorSpec::Identity => f.write_str("identity"),
            TranslatorSpec::Stub => f.write_str("stub"),
            TranslatorSpec::Exec(cmd) => write!(f, "exec:{cmd}"),
        }
    }
}
