//! `.omt` tile container.
//!
//! Layout: the 4-byte magic `OMT1`, a little-endian `u32` header length, a
//! UTF-8 JSON header, then raw little-endian `f32` payloads. Payload offsets
//! in the header are relative to the first byte after the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModalityData, ModalityKind, MultimodalTile};
use crate::error::{Error, Result};

pub const OMT_MAGIC: &[u8; 4] = b"OMT1";
pub const OMT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    tile_id: String,
    grid: [usize; 2],
    labels: Option<Vec<u8>>,
    modalities: Vec<PayloadEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PayloadEntry {
    name: String,
    kind: ModalityKind,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
    timestamps: Option<Vec<u16>>,
}

pub fn encode_tile(tile: &MultimodalTile) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tile.arrays.len());
    let mut offset = 0;
    for a in &tile.arrays {
        let length = a.values.len() * 4;
        entries.push(PayloadEntry {
            name: a.name.clone(),
            kind: a.kind,
            shape: a.shape.clone(),
            dtype: "f32".into(),
            offset,
            length,
            timestamps: a.days.clone(),
        });
        offset += length;
    }
    let header = Header {
        version: OMT_VERSION,
        tile_id: tile.tile_id.clone(),
        grid: [tile.grid.0, tile.grid.1],
        labels: tile.raw_labels().map(<[u8]>::to_vec),
        modalities: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(OMT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for a in &tile.arrays {
        for v in &a.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tile(bytes: &[u8], path: &Path) -> Result<MultimodalTile> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != OMT_MAGIC {
        if &bytes[..3] == b"OMT" {
            let found = (bytes[3] as char).to_digit(10).unwrap_or(0);
            return Err(Error::Version { what: "tile container", found, expected: OMT_VERSION });
        }
        return Err(Error::format(path, "bad magic bytes (expected OMT1)"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[8..body])
        .map_err(|e| Error::format(path, format!("corrupt header: {e}")))?;
    if header.version != OMT_VERSION {
        return Err(Error::Version { what: "tile container", found: header.version, expected: OMT_VERSION });
    }
    let payload = &bytes[body..];
    let mut arrays = Vec::with_capacity(header.modalities.len());
    for e in header.modalities {
        if e.dtype != "f32" {
            return Err(Error::format(path, format!("unsupported dtype `{}`", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.length != count * 4 {
            return Err(Error::format(path, format!("modality `{}`: length {} vs shape {:?}", e.name, e.length, e.shape)));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::format(path, format!("modality `{}` payload out of bounds", e.name)))?;
        let values = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(ModalityData { name: e.name, kind: e.kind, shape: e.shape, values, days: e.timestamps });
    }
    Ok(MultimodalTile::new(header.tile_id, (header.grid[0], header.grid[1]), arrays, header.labels))
}

pub fn write_tile(tile: &MultimodalTile, path: &Path) -> Result<()> {
    let bytes = encode_tile(tile)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tile(path: &Path) -> Result<MultimodalTile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tile(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MultimodalTile {
        MultimodalTile::new(
            "t0",
            (1, 1),
            vec![
                ModalityData {
                    name: "img".into(),
                    kind: ModalityKind::Image,
                    shape: vec![1, 2, 2],
                    values: vec![0.5, -1.25, f32::MIN_POSITIVE, 3.0e7],
                    days: None,
                },
                ModalityData {
                    name: "ts".into(),
                    kind: ModalityKind::TimeSeries,
                    shape: vec![2, 1, 1, 1],
                    values: vec![0.1, 0.2],
                    days: Some(vec![3, 200]),
                },
            ],
            Some(vec![1, 0]),
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = encode_tile(&t).unwrap();
        let back = decode_tile(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.arrays.iter().zip(&t.arrays) {
            let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = encode_tile(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_tile(&bytes, Path::new("mem")), Err(Error::Format { .. })));
    }

    #[test]
    fn future_container_version_is_rejected() {
        let mut bytes = encode_tile(&sample()).unwrap();
        bytes[3] = b'2';
        assert!(matches!(decode_tile(&bytes, Path::new("mem")), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_tile(&sample()).unwrap();
        let err = decode_tile(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
