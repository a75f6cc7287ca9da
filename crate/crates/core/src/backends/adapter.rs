//! Out-of-process model hosting over HTTP.
//!
//! # Wire format
//!
//! Requests and responses share one framing:
//!
//! ```text
//! u32 (little endian)  header length N
//! N bytes              JSON header
//! ...                  blobs, concatenated, located by the header's `blobs`
//! ```
//!
//! Every blob entry carries `name`, `encoding`, `offset` and `len`, with
//! offsets relative to the end of the header. Encodings are `f64le` (raw
//! little-endian doubles, lossless; used for latents, condition tensors and
//! masks) and `png16` (16-bit PNG; used for images). `shapes` maps blob
//! names to `[height, width, channels]`.
//!
//! `POST {endpoint}/generate` takes a `generate` request header:
//!
//! ```json
//! {"kind": "generate", "step": 3, "prompt": "add moss to the wall",
//!  "channel_layout": [{"name": "albedo", "start": 0, "len": 3}, ...],
//!  "dropout_state": [true, true, true, true, true, true],
//!  "shapes": {"latent": [h, w, 3], "condition": [h, w, 21], "mask": [h, w, 1]},
//!  "blobs": [...]}
//! ```
//!
//! and answers `{"status": "ok", "shapes": {"image": [h, w, 3]}, "blobs": [...]}`
//! with one `image` blob, or `{"status": "error", "message": "..."}`.
//!
//! `POST {endpoint}/segment` takes `{"kind": "segment", "entity": "...",
//! "shapes": {"image": ...}}` with an `image` blob and answers with a
//! single-channel `map` blob at the model's native resolution.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    Capabilities, GenerateInput, GenerativeBackend, GenerativeBackendSpec, Reentrancy,
    SegmentationBackend,
};
use crate::error::{Error, Result};
use crate::gbuffer::{ChannelSpan, ConditionTensor};
use crate::image::{decode_png, encode_png, Image, SampleFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobEncoding {
    F64le,
    Png16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub name: String,
    pub encoding: BlobEncoding,
    pub offset: usize,
    pub len: usize,
}

/// `[height, width, channels]`.
pub type Shape = [usize; 3];

fn shape_of(img: &Image) -> Shape {
    [img.height(), img.width(), img.channels()]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_layout: Option<Vec<ChannelSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_state: Option<[bool; 6]>,
    #[serde(default)]
    pub shapes: BTreeMap<String, Shape>,
    #[serde(default)]
    pub blobs: Vec<BlobRef>,
}

/// A framed message under construction or after parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            payload: Vec::new(),
        }
    }

    pub fn push_image(&mut self, name: &str, img: &Image, encoding: BlobEncoding) -> Result<()> {
        let bytes = match encoding {
            BlobEncoding::F64le => img.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            BlobEncoding::Png16 => encode_png(img, SampleFormat::U16)?,
        };
        self.header.blobs.push(BlobRef {
            name: name.to_string(),
            encoding,
            offset: self.payload.len(),
            len: bytes.len(),
        });
        self.header.shapes.insert(name.to_string(), shape_of(img));
        self.payload.extend_from_slice(&bytes);
        Ok(())
    }

    pub fn image(&self, name: &str) -> Result<Option<Image>> {
        let Some(blob) = self.header.blobs.iter().find(|b| b.name == name) else {
            return Ok(None);
        };
        let bytes = self
            .payload
            .get(blob.offset..blob.offset + blob.len)
            .ok_or_else(|| Error::Protocol(format!("blob `{name}` exceeds payload")))?;
        let [h, w, c] = *self
            .header
            .shapes
            .get(name)
            .ok_or_else(|| Error::Protocol(format!("no shape for blob `{name}`")))?;
        let img = match blob.encoding {
            BlobEncoding::F64le => {
                if bytes.len() != w * h * c * 8 {
                    return Err(Error::Protocol(format!(
                        "blob `{name}` has {} bytes, shape needs {}",
                        bytes.len(),
                        w * h * c * 8
                    )));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                Image::from_vec(w, h, c, data)?
            }
            BlobEncoding::Png16 => {
                let (img, _) = decode_png(bytes)?;
                if img.dims() != (w, h) || img.channels() != c {
                    return Err(Error::Protocol(format!(
                        "blob `{name}` decodes to {}x{}x{}, header says {w}x{h}x{c}",
                        img.width(),
                        img.height(),
                        img.channels()
                    )));
                }
                img
            }
        };
        Ok(Some(img))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(4 + header.len() + self.payload.len());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Protocol(
                "frame shorter than its length prefix".into(),
            ));
        }
        let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes
            .get(4..4 + n)
            .ok_or_else(|| Error::Protocol("header length exceeds frame".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Protocol(format!("bad header: {e}")))?;
        Ok(Self {
            header,
            payload: bytes[4 + n..].to_vec(),
        })
    }
}

/// Owned form of a generate call, as carried on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub step: usize,
    pub prompt: Option<String>,
    pub latent: Image,
    pub condition: Image,
    pub dropout_state: [bool; 6],
    pub mask: Option<Image>,
}

impl GenerateRequest {
    pub fn from_input(input: &GenerateInput<'_>) -> Self {
        Self {
            step: input.step,
            prompt: input.prompt.map(str::to_string),
            latent: input.latent.0.clone(),
            condition: input.condition.data().clone(),
            dropout_state: input.condition.dropout_state(),
            mask: input.mask.cloned(),
        }
    }

    pub fn to_frame(&self) -> Result<Frame> {
        let mut frame = Frame::new(Header {
            kind: Some("generate".into()),
            step: Some(self.step),
            prompt: self.prompt.clone(),
            channel_layout: Some(ConditionTensor::channel_layout()),
            dropout_state: Some(self.dropout_state),
            ..Header::default()
        });
        frame.push_image("latent", &self.latent, BlobEncoding::F64le)?;
        frame.push_image("condition", &self.condition, BlobEncoding::F64le)?;
        if let Some(m) = &self.mask {
            frame.push_image("mask", m, BlobEncoding::F64le)?;
        }
        Ok(frame)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_frame()?.encode()
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let h = &frame.header;
        if h.kind.as_deref() != Some("generate") {
            return Err(Error::Protocol(format!(
                "expected generate request, got {:?}",
                h.kind
            )));
        }
        let missing = |what: &str| Error::Protocol(format!("request lacks `{what}`"));
        Ok(Self {
            step: h.step.ok_or_else(|| missing("step"))?,
            prompt: h.prompt.clone(),
            latent: frame.image("latent")?.ok_or_else(|| missing("latent"))?,
            condition: frame
                .image("condition")?
                .ok_or_else(|| missing("condition"))?,
            dropout_state: h.dropout_state.unwrap_or([true; 6]),
            mask: frame.image("mask")?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_frame(&Frame::decode(bytes)?)
    }
}

/// Builds an `ok` response frame carrying one image blob.
pub fn ok_response(name: &str, img: &Image) -> Result<Vec<u8>> {
    let mut frame = Frame::new(Header {
        status: Some("ok".into()),
        ..Header::default()
    });
    frame.push_image(name, img, BlobEncoding::Png16)?;
    frame.encode()
}

pub fn error_response(message: &str) -> Result<Vec<u8>> {
    Frame::new(Header {
        status: Some("error".into()),
        message: Some(message.to_string()),
        ..Header::default()
    })
    .encode()
}

fn parse_response(bytes: &[u8], blob: &str) -> Result<Image> {
    let frame = Frame::decode(bytes)?;
    match frame.header.status.as_deref() {
        Some("ok") => frame
            .image(blob)?
            .ok_or_else(|| Error::Protocol(format!("response lacks `{blob}`"))),
        Some("error") => Err(Error::Remote(
            frame.header.message.unwrap_or_else(|| "unspecified".into()),
        )),
        other => Err(Error::Protocol(format!(
            "unknown response status {other:?}"
        ))),
    }
}

/// Connection settings for an external model server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub endpoint: String,
    #[serde(with = "millis")]
    pub timeout: Duration,
    /// Extra attempts after the first failure.
    pub retries: u32,
    #[serde(with = "millis")]
    pub backoff: Duration,
    pub reentrancy: Reentrancy,
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl AdapterConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(120),
            retries: 3,
            backoff: Duration::from_millis(200),
            reentrancy: Reentrancy::Serialized,
        }
    }
}

/// Blocking HTTP client with exponential-backoff retries.
pub struct HttpClient {
    config: AdapterConfig,
    agent: ureq::Agent,
    queue: Mutex<()>,
}

enum Attempt {
    Retryable(Error),
    Fatal(Error),
}

impl HttpClient {
    pub fn new(config: AdapterConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            agent,
            queue: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    fn attempt(&self, url: &str, body: &[u8]) -> std::result::Result<Vec<u8>, Attempt> {
        let map_transport = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => Attempt::Retryable(Error::Timeout(self.config.timeout)),
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
                Attempt::Retryable(Error::Timeout(self.config.timeout))
            }
            ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
                Attempt::Retryable(Error::BackendUnavailable(format!("{url}: {e}")))
            }
            other => Attempt::Fatal(Error::Protocol(other.to_string())),
        };
        let mut resp = self
            .agent
            .post(url)
            .header("Content-Type", "application/octet-stream")
            .send(body)
            .map_err(map_transport)?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(map_transport)?;
        match status {
            200 => Ok(bytes),
            500..=599 => {
                // Servers may still send a framed error message.
                let msg = Frame::decode(&bytes)
                    .ok()
                    .and_then(|f| f.header.message)
                    .unwrap_or_else(|| format!("HTTP {status}"));
                Err(Attempt::Fatal(Error::Remote(msg)))
            }
            _ => Err(Attempt::Fatal(Error::Protocol(format!(
                "HTTP {status} from {url}"
            )))),
        }
    }

    /// POSTs `body` to `{endpoint}/{path}`, retrying transport failures.
    pub fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>> {
        let _guard = match self.config.reentrancy {
            Reentrancy::Serialized => Some(
                self.queue
                    .lock()
                    .map_err(|_| Error::BackendUnavailable("adapter lock poisoned".into()))?,
            ),
            Reentrancy::Reentrant => None,
        };
        let url = format!("{}/{path}", self.config.endpoint.trim_end_matches('/'));
        let mut delay = self.config.backoff;
        let mut last = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                log::warn!("retrying {url} in {delay:?} (attempt {})", attempt + 1);
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&url, body) {
                Ok(bytes) => return Ok(bytes),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Transfer-field backend served by an external process.
pub struct HttpGenerator {
    client: HttpClient,
    name: String,
}

impl HttpGenerator {
    pub fn new(config: AdapterConfig) -> Self {
        let name = format!("http:{}", config.endpoint);
        Self {
            client: HttpClient::new(config),
            name,
        }
    }
}

impl GenerativeBackend for HttpGenerator {
    fn spec(&self) -> GenerativeBackendSpec {
        GenerativeBackendSpec {
            name: self.name.clone(),
            capabilities: Capabilities {
                accepts_mask: true,
                accepts_prompt: true,
                deterministic: false,
            },
            native_resolution: None,
            reentrancy: self.client.config.reentrancy,
        }
    }

    fn generate(&self, input: &GenerateInput<'_>) -> Result<Image> {
        let body = GenerateRequest::from_input(input).encode()?;
        let bytes = self.client.post("generate", &body)?;
        let img = parse_response(&bytes, "image")?;
        let expected = input.condition.dims();
        if img.dims() != expected || img.channels() != 3 {
            return Err(Error::Shape(format!(
                "remote returned {}x{}x{}, expected {}x{}x3",
                img.width(),
                img.height(),
                img.channels(),
                expected.0,
                expected.1
            )));
        }
        Ok(img)
    }
}

/// Segmentation backend served by an external process.
pub struct HttpSegmenter {
    client: HttpClient,
}

impl HttpSegmenter {
    pub fn new(config: AdapterConfig) -> Self {
        Self {
            client: HttpClient::new(config),
        }
    }
}

impl SegmentationBackend for HttpSegmenter {
    fn segment(&self, image: &Image, entity: &str) -> Result<Image> {
        let mut frame = Frame::new(Header {
            kind: Some("segment".into()),
            entity: Some(entity.to_string()),
            ..Header::default()
        });
        frame.push_image("image", image, BlobEncoding::Png16)?;
        let bytes = self.client.post("segment", &frame.encode()?)?;
        parse_response(&bytes, "map")
    }
}
