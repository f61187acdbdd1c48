//! Episode container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "LOCOMAN-EPISODE 1\n"                      magic and version, ASCII
//! <header JSON>"\n"                          skill, text_queries, label_buffer,
//!                                            frame_count, metadata
//! repeated frame_count times:
//!   u8  'F' (0x46)
//!   u32 payload length
//!   payload:
//!     f64 timestamp
//!     u8  end-signal label
//!     u8  action flags: bit0 ee_target, bit1 gripper present,
//!                       bit2 gripper closed, bit3 body rates
//!     f64 ×3 base vx, vy, wz
//!     [f64 ×12 ee rotation row-major, translation]   if bit0
//!     [f64 ×2 height rate, pitch rate]                if bit3
//!     u32 n, f64 ×n proprioception
//!     u8  camera count, per camera:
//!       u8 camera tag (0 head, 1 wrist), u8 channel tag (0 features,
//!       1 depth only, 2 reserved raw image), u32 h, u32 w, u32 c,
//!       f64 ×(h·w·c) features (c = 0 unless channel 0), f64 ×(h·w) depth
//!     u16 attention count, per map:
//!       u16 query index, u8 camera tag, u32 h, u32 w, f64 ×(h·w) values
//! u8  'E' (0x45)
//! u32 frame count
//! u32 CRC-32 (IEEE) of every preceding byte
//! ```

use super::*;
use crate::geometry::{BaseCommand, GripperCommand, Pose};
use crate::simworld::BodyCommand;
use nalgebra::{Matrix3, Vector2, Vector3};
use std::path::Path;

pub const EPISODE_MAGIC: &str = "LOCOMAN-EPISODE";
pub const EPISODE_VERSION: u32 = 1;

const FRAME_TAG: u8 = b'F';
const END_TAG: u8 = b'E';

#[derive(Serialize, Deserialize)]
struct Header {
    skill: String,
    text_queries: Vec<String>,
    label_buffer: usize,
    frame_count: usize,
    metadata: EpisodeMetadata,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
}

fn encode_frame(f: &Frame) -> Result<Vec<u8>, DemoError> {
    let mut w = Writer(Vec::new());
    w.f64(f.timestamp);
    w.u8(f.end_signal_label);
    let a = &f.action;
    let mut flags = 0u8;
    if a.ee_target.is_some() {
        flags |= 1;
    }
    if let Some(g) = a.gripper {
        flags |= 2;
        if g.closed {
            flags |= 4;
        }
    }
    if a.body.is_some() {
        flags |= 8;
    }
    w.u8(flags);
    w.f64(a.base.linear_velocity.x);
    w.f64(a.base.linear_velocity.y);
    w.f64(a.base.angular_velocity);
    if let Some(p) = &a.ee_target {
        for r in 0..3 {
            for c in 0..3 {
                w.f64(p.rotation[(r, c)]);
            }
        }
        w.f64s(p.translation.as_slice());
    }
    if let Some(b) = &a.body {
        w.f64(b.height_rate);
        w.f64(b.pitch_rate);
    }
    let o = &f.observation;
    w.u32(len32(o.proprio.len())?);
    w.f64s(&o.proprio);
    w.u8(u8::try_from(o.cameras.len()).map_err(|_| DemoError::Invalid("too many cameras".into()))?);
    for c in &o.cameras {
        w.u8(c.camera.tag());
        w.u8(c.channel.tag());
        w.u32(len32(c.height)?);
        w.u32(len32(c.width)?);
        match &c.features {
            Some(fm) => {
                w.u32(len32(fm.channels)?);
                w.f64s(&fm.data);
            }
            None => w.u32(0),
        }
        w.f64s(&c.depth);
    }
    w.u16(u16::try_from(o.attention.len()).map_err(|_| DemoError::Invalid("too many attention maps".into()))?);
    for a in &o.attention {
        w.u16(u16::try_from(a.query).map_err(|_| DemoError::Invalid("query index too large".into()))?);
        w.u8(a.camera.tag());
        w.u32(len32(a.map.height)?);
        w.u32(len32(a.map.width)?);
        w.f64s(&a.map.values);
    }
    Ok(w.0)
}

fn len32(n: usize) -> Result<u32, DemoError> {
    u32::try_from(n).map_err(|_| DemoError::Invalid(format!("length {n} does not fit in u32")))
}

/// Serializes a validated episode.
pub fn write_episode(ep: &Episode) -> Result<Vec<u8>, DemoError> {
    ep.validate()?;
    let header = Header {
        skill: ep.skill.clone(),
        text_queries: ep.text_queries.clone(),
        label_buffer: ep.label_buffer,
        frame_count: ep.frames.len(),
        metadata: ep.metadata.clone(),
    };
    let mut w = Writer(format!("{EPISODE_MAGIC} {EPISODE_VERSION}\n").into_bytes());
    let json = serde_json::to_string(&header).map_err(|e| DemoError::Malformed(e.to_string()))?;
    w.0.extend_from_slice(json.as_bytes());
    w.u8(b'\n');
    for f in &ep.frames {
        let payload = encode_frame(f)?;
        w.u8(FRAME_TAG);
        w.u32(len32(payload.len())?);
        w.0.extend_from_slice(&payload);
    }
    w.u8(END_TAG);
    w.u32(len32(ep.frames.len())?);
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DemoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(DemoError::Truncated(format!("{what} at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, DemoError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, DemoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, DemoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64, DemoError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, DemoError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| DemoError::Malformed(format!("{what} too long")))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn line(&mut self, what: &str) -> Result<&'a str, DemoError> {
        let rest = &self.buf[self.pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(DemoError::Truncated(format!("{what} line")));
        };
        let s = std::str::from_utf8(&rest[..nl]).map_err(|_| DemoError::Malformed(format!("{what} is not UTF-8")))?;
        self.pos += nl + 1;
        Ok(s)
    }
}

fn camera_tag(tag: u8) -> Result<CameraId, DemoError> {
    CameraId::from_tag(tag).ok_or_else(|| DemoError::Malformed(format!("unknown camera tag {tag}")))
}

fn decode_frame(payload: &[u8]) -> Result<Frame, DemoError> {
    let mut r = Reader { buf: payload, pos: 0 };
    let timestamp = r.f64("timestamp")?;
    let end_signal_label = r.u8("label")?;
    let flags = r.u8("action flags")?;
    if flags & !0x0f != 0 {
        return Err(DemoError::Malformed(format!("unknown action flags {flags:#x}")));
    }
    let base = BaseCommand {
        linear_velocity: Vector2::new(r.f64("base")?, r.f64("base")?),
        angular_velocity: r.f64("base")?,
    };
    let ee_target = if flags & 1 != 0 {
        let m = r.f64s(9, "ee rotation")?;
        let t = r.f64s(3, "ee translation")?;
        Some(Pose {
            rotation: Matrix3::from_row_slice(&m),
            translation: Vector3::from_column_slice(&t),
        })
    } else {
        None
    };
    let gripper = (flags & 2 != 0).then_some(GripperCommand { closed: flags & 4 != 0 });
    let body = if flags & 8 != 0 {
        Some(BodyCommand {
            height_rate: r.f64("body")?,
            pitch_rate: r.f64("body")?,
        })
    } else {
        None
    };
    let n = r.u32("proprio length")? as usize;
    let proprio = r.f64s(n, "proprio")?;
    let ncam = r.u8("camera count")?;
    let mut cameras = Vec::with_capacity(ncam as usize);
    for _ in 0..ncam {
        let camera = camera_tag(r.u8("camera tag")?)?;
        let ctag = r.u8("channel tag")?;
        let channel = ChannelType::from_tag(ctag).ok_or_else(|| DemoError::Malformed(format!("unknown channel tag {ctag}")))?;
        if channel == ChannelType::RawImage {
            return Err(DemoError::Malformed("raw image payloads are not supported".into()));
        }
        let h = r.u32("camera height")? as usize;
        let w = r.u32("camera width")? as usize;
        let c = r.u32("camera channels")? as usize;
        let cells = h.checked_mul(w).ok_or_else(|| DemoError::Malformed("camera size overflow".into()))?;
        let features = match channel {
            ChannelType::Features => {
                let n = cells.checked_mul(c).ok_or_else(|| DemoError::Malformed("feature size overflow".into()))?;
                let data = r.f64s(n, "features")?;
                Some(FeatureMap::new(h, w, c, data).map_err(|e| DemoError::Malformed(e.to_string()))?)
            }
            _ if c != 0 => return Err(DemoError::Malformed("depth-only payload with channels".into())),
            _ => None,
        };
        let depth = r.f64s(cells, "depth")?;
        cameras.push(CameraPayload {
            camera,
            channel,
            height: h,
            width: w,
            features,
            depth,
        });
    }
    let natt = r.u16("attention count")?;
    let mut attention = Vec::with_capacity(natt as usize);
    for _ in 0..natt {
        let query = r.u16("query index")? as usize;
        let camera = camera_tag(r.u8("camera tag")?)?;
        let h = r.u32("map height")? as usize;
        let w = r.u32("map width")? as usize;
        let cells = h.checked_mul(w).ok_or_else(|| DemoError::Malformed("map size overflow".into()))?;
        let values = r.f64s(cells, "attention")?;
        attention.push(AttentionPayload {
            query,
            camera,
            map: AttentionMap { height: h, width: w, values },
        });
    }
    if r.pos != payload.len() {
        return Err(DemoError::Malformed("trailing bytes in frame record".into()));
    }
    Ok(Frame {
        timestamp,
        observation: FrameObservation { proprio, cameras, attention },
        action: WholeBodyCommand { base, ee_target, gripper, body },
        end_signal_label,
    })
}

/// Parses and validates an episode. Never returns a partial episode.
pub fn read_episode(bytes: &[u8]) -> Result<Episode, DemoError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.line("magic")?;
    let version = magic
        .strip_prefix(EPISODE_MAGIC)
        .and_then(|v| v.strip_prefix(' '))
        .ok_or_else(|| DemoError::Malformed("not an episode file".into()))?;
    let version: u32 = version.parse().map_err(|_| DemoError::Malformed(format!("bad version `{version}`")))?;
    if version != EPISODE_VERSION {
        return Err(DemoError::VersionMismatch {
            expected: EPISODE_VERSION,
            found: version,
        });
    }
    let header: Header =
        serde_json::from_str(r.line("header")?).map_err(|e| DemoError::Malformed(format!("header: {e}")))?;
    let mut frames = Vec::new();
    let trailer_count = loop {
        match r.u8("record tag")? {
            FRAME_TAG => {
                let len = r.u32("record length")? as usize;
                let payload = r.take(len, "frame record")?;
                frames.push(decode_frame(payload)?);
            }
            END_TAG => break r.u32("trailer count")? as usize,
            t => return Err(DemoError::Malformed(format!("unknown record tag {t:#x}"))),
        }
    };
    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(DemoError::Malformed("data after trailer".into()));
    }
    if header.frame_count != frames.len() || trailer_count != frames.len() {
        return Err(DemoError::CountMismatch {
            header: header.frame_count,
            body: frames.len(),
            trailer: trailer_count,
        });
    }
    let computed = crc32fast::hash(&bytes[..crc_at]);
    if computed != stored {
        return Err(DemoError::Checksum { stored, computed });
    }
    let ep = Episode {
        skill: header.skill,
        text_queries: header.text_queries,
        label_buffer: header.label_buffer,
        frames,
        metadata: header.metadata,
    };
    ep.validate()?;
    Ok(ep)
}

pub fn save_episode(ep: &Episode, path: impl AsRef<Path>) -> Result<(), DemoError> {
    let path = path.as_ref();
    let bytes = write_episode(ep)?;
    std::fs::write(path, bytes).map_err(|source| DemoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode, DemoError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DemoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_episode(&bytes)
}
