//! Length-prefixed JSON frames: a 4-byte big-endian payload length, then UTF-8 JSON.

use std::io::{self, Read, Write};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::raster::ImageBuffer;

pub const SCHEMA: u32 = 1;
pub const ENCODING_PNG_BASE64: &str = "png-base64";
/// Frames above this size are refused rather than allocated.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge(u64),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unexpected reply: {0}")]
    Unexpected(String),
    #[error("reply id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
}

/// Transport failure or protocol violation while reading a frame.
#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), FrameError> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME_LEN)
        .ok_or(ProtocolError::FrameTooLarge(payload.len() as u64))?;
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len as u64).into());
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

pub fn write_message<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<(), FrameError> {
    let bytes = serde_json::to_vec(msg).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    write_frame(w, &bytes)
}

pub fn read_message<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T, FrameError> {
    let bytes = read_frame(r)?;
    serde_json::from_slice(&bytes).map_err(|e| ProtocolError::Malformed(e.to_string()).into())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub op: String,
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Hello {
    pub fn client() -> Self {
        Self {
            op: "hello".into(),
            schema: SCHEMA,
            name: None,
        }
    }

    pub fn server(name: &str) -> Self {
        Self {
            op: "hello".into(),
            schema: SCHEMA,
            name: Some(name.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRequest {
    pub id: u64,
    pub op: String,
    pub width: u32,
    pub height: u32,
    pub encoding: String,
    pub image: String,
    /// Ground-truth camera pose (m, deg) for test-mode oracle services.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<[f64; 6]>,
    /// Loop iteration the image belongs to, for scheduled corruption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u64>,
}

impl EstimateRequest {
    pub fn new(id: u64, image: &ImageBuffer) -> Self {
        let png = image.encode_png().expect("in-memory PNG encoding");
        Self {
            id,
            op: "estimate".into(),
            width: image.width(),
            height: image.height(),
            encoding: ENCODING_PNG_BASE64.into(),
            image: base64::engine::general_purpose::STANDARD.encode(png),
            truth: None,
            iteration: None,
        }
    }

    pub fn decode_image(&self) -> Result<ImageBuffer, ProtocolError> {
        if self.encoding != ENCODING_PNG_BASE64 {
            return Err(ProtocolError::Malformed(format!(
                "unsupported encoding {:?}",
                self.encoding
            )));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.image)
            .map_err(|e| ProtocolError::Malformed(format!("image is not base64: {e}")))?;
        let img = ImageBuffer::decode_png(&bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if img.dimensions() != (self.width, self.height) {
            return Err(ProtocolError::Malformed(format!(
                "image is {}x{}, header says {}x{}",
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        Ok(img)
    }
}

/// Reply to an estimate request: exactly one of `pose` or `error`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReply {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// SHA-256 of the decoded pixels, echoed by the reference service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
}

impl EstimateReply {
    pub fn pose(id: u64, pose: [f64; 6]) -> Self {
        Self {
            id,
            pose: Some(pose.to_vec()),
            error: None,
            image_sha256: None,
        }
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        Self {
            id,
            pose: None,
            error: Some(message.into()),
            image_sha256: None,
        }
    }

    /// The pose in file units, or why there is none.
    pub fn into_pose(self) -> Result<Result<[f64; 6], String>, ProtocolError> {
        match (self.pose, self.error) {
            (Some(p), None) => {
                let arr: [f64; 6] = p
                    .as_slice()
                    .try_into()
                    .map_err(|_| ProtocolError::Malformed(format!("pose has {} numbers, expected 6", p.len())))?;
                if arr.iter().any(|v| !v.is_finite()) {
                    return Err(ProtocolError::Malformed("pose contains non-finite values".into()));
                }
                Ok(Ok(arr))
            }
            (None, Some(e)) => Ok(Err(e)),
            (Some(_), Some(_)) => Err(ProtocolError::Malformed("reply has both pose and error".into())),
            (None, None) => Err(ProtocolError::Malformed("reply has neither pose nor error".into())),
        }
    }
}
