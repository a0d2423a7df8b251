//! OGS sequence files.
//!
//! Little-endian throughout:
//!
//! | offset | size | field          |
//! |--------|------|----------------|
//! | 0      | 4    | magic `OGS1`   |
//! | 4      | 1    | version (1)    |
//! | 5      | 1    | channel count  |
//! | 6      | 2    | height         |
//! | 8      | 2    | width          |
//! | 10     | 2    | frame count    |
//! | 12     | 4    | dt (f32)       |
//!
//! followed by `f32` cells, frame-major, then channel-major, then row-major.
//! The header carries neither the cell resolution nor the first timestamp;
//! decoded frames start at `t = 0`.

use super::{GridSequence, GridSpec, OccupancyGrid};
use crate::error::{Error, Result};

pub const OGS_MAGIC: &[u8; 4] = b"OGS1";
pub const OGS_VERSION: u8 = 1;
pub const OGS_HEADER_LEN: usize = 16;

/// Resolution assigned by [`decode_ogs`], matching [`GridSpec::desk`].
pub const DEFAULT_RESOLUTION: f64 = 0.5;

pub fn encode_ogs(seq: &GridSequence) -> Result<Vec<u8>> {
    let spec = seq
        .spec()
        .ok_or_else(|| Error::Input("cannot encode an empty sequence".into()))?;
    let channels = u8::try_from(seq.num_channels())
        .map_err(|_| Error::Input("too many channels for OGS".into()))?;
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Input(format!("{what} {v} exceeds the OGS u16 field")))
    };
    let height = narrow(spec.height, "height")?;
    let width = narrow(spec.width, "width")?;
    let frames = narrow(seq.len(), "frame count")?;

    let cells = spec.cells() * seq.num_channels() * seq.len();
    let mut out = Vec::with_capacity(OGS_HEADER_LEN + 4 * cells);
    out.extend_from_slice(OGS_MAGIC);
    out.push(OGS_VERSION);
    out.push(channels);
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&(seq.dt() as f32).to_le_bytes());
    for frame in seq.frames() {
        for ch in frame.channels() {
            for v in ch {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_ogs(bytes: &[u8]) -> Result<GridSequence> {
    decode_ogs_with(bytes, DEFAULT_RESOLUTION)
}

/// Decodes with an explicit cell resolution in meters.
pub fn decode_ogs_with(bytes: &[u8], resolution: f64) -> Result<GridSequence> {
    if bytes.len() < OGS_HEADER_LEN {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated header: {} of {OGS_HEADER_LEN} bytes",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != OGS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        ));
    }
    if bytes[4] != OGS_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let channels = bytes[5] as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::format(
            5,
            format!("channel count {channels} not in 1..=2"),
        ));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let (height, width, frames) = (u16_at(6), u16_at(8), u16_at(10));
    if height == 0 || width == 0 {
        return Err(Error::format(6, format!("empty grid {height}x{width}")));
    }
    let dt = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::format(12, format!("invalid dt {dt}")));
    }

    let plane = height * width;
    let expected = OGS_HEADER_LEN + 4 * plane * channels * frames;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected),
            format!("expected {expected} bytes in total, got {}", bytes.len()),
        ));
    }
    let spec = GridSpec::new(height, width, resolution)?;
    let mut offset = OGS_HEADER_LEN;
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let mut chans = Vec::with_capacity(channels);
        for _ in 0..channels {
            let mut ch = Vec::with_capacity(plane);
            for _ in 0..plane {
                let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::format(
                        offset,
                        format!("cell value {v} outside [0, 1]"),
                    ));
                }
                ch.push(v);
                offset += 4;
            }
            chans.push(ch);
        }
        out.push(OccupancyGrid::new(spec, chans, k as f64 * dt as f64)?);
    }
    GridSequence::new(out, dt as f64)
}
