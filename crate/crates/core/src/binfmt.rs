use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Shared on-disk layout for factor caches and checkpoints: an 8-byte
/// magic, a little-endian u64 JSON-header length, the JSON header, then
/// concatenated little-endian f64 payload blocks whose shapes the header
/// declares.
pub fn write_block(
    path: &Path,
    magic: &[u8; 8],
    header: &impl Serialize,
    payloads: &[&[f64]],
) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let payload_len: usize = payloads.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(8 + 8 + header_json.len() + payload_len * 8);
    out.extend_from_slice(magic);
    let mut len_buf = [0u8; 8];
    LittleEndian::write_u64(&mut len_buf, header_json.len() as u64);
    out.extend_from_slice(&len_buf);
    out.extend_from_slice(&header_json);
    let mut f_buf = [0u8; 8];
    for payload in payloads {
        for &v in *payload {
            LittleEndian::write_f64(&mut f_buf, v);
            out.extend_from_slice(&f_buf);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Counterpart of [`write_block`]: returns the parsed header and a
/// cursor over the f64 payload.
pub fn read_block<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, PayloadReader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "{} is not a {} file",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = LittleEndian::read_u64(&bytes[8..16]) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))?;
    let header: H = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    Ok((
        header,
        PayloadReader {
            bytes,
            offset: header_end,
        },
    ))
}

pub struct PayloadReader {
    bytes: Vec<u8>,
    offset: usize,
}

impl PayloadReader {
    pub fn take_f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        let end = self
            .offset
            .checked_add(len * 8)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("payload shorter than header declares".into()))?;
        let mut out = Vec::with_capacity(len);
        for chunk in self.bytes[self.offset..end].chunks_exact(8) {
            out.push(LittleEndian::read_f64(chunk));
        }
        self.offset = end;
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after declared payload",
                self.bytes.len() - self.offset
            )));
        }
        Ok(())
    }
}
