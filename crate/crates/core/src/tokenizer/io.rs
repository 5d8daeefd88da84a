//! Binary token-sequence records.
//!
//! Each record is a 24-byte header followed by little-endian ids:
//! magic `MRTS`, version u16, id width u8 (2 or 4), one reserved byte,
//! vocabulary hash u64, id count u64. Shards are concatenated records.

use std::io::Write;

use super::TokenizerError;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"MRTS";
const VERSION: u16 = 1;
const HEADER: usize = 24;

pub fn write_sequence<W: Write>(out: &mut W, ids: &[u32], vocab_hash: u64) -> std::io::Result<()> {
    let width: u8 = if ids.iter().all(|&id| id <= u16::MAX as u32) { 2 } else { 4 };
    let mut buf = Vec::with_capacity(HEADER + ids.len() * width as usize);
    buf.extend_from_slice(SEQUENCE_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(width);
    buf.push(0);
    buf.extend_from_slice(&vocab_hash.to_le_bytes());
    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for &id in ids {
        if width == 2 {
            buf.extend_from_slice(&(id as u16).to_le_bytes());
        } else {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

/// Reads every record in `bytes`. When `expected_hash` is given, records
/// written against another vocabulary are rejected.
pub fn read_sequences(bytes: &[u8], expected_hash: Option<u64>) -> Result<Vec<Vec<u32>>, TokenizerError> {
    let fail = |at: usize, msg: &str| TokenizerError::Format(format!("sequence record at byte {at}: {msg}"));
    let mut out = Vec::new();
    let mut at = 0usize;
    while at < bytes.len() {
        let head = bytes.get(at..at + HEADER).ok_or_else(|| fail(at, "truncated header"))?;
        if &head[..4] != SEQUENCE_MAGIC {
            return Err(fail(at, "bad magic"));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(fail(at, "unsupported version"));
        }
        let width = head[6] as usize;
        if width != 2 && width != 4 {
            return Err(fail(at, "bad id width"));
        }
        let hash = u64::from_le_bytes(head[8..16].try_into().unwrap());
        if expected_hash.is_some_and(|h| h != hash) {
            return Err(fail(at, "vocabulary hash mismatch"));
        }
        let len = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        let body_len = len.checked_mul(width).ok_or_else(|| fail(at, "length overflow"))?;
        let body = bytes
            .get(at + HEADER..at + HEADER + body_len)
            .ok_or_else(|| fail(at, "truncated body"))?;
        let ids = if width == 2 {
            body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect()
        } else {
            body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        out.push(ids);
        at += HEADER + body_len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let mut buf = Vec::new();
        write_sequence(&mut buf, &[1, 2, 65535], 7).unwrap();
        write_sequence(&mut buf, &[70000, 3], 7).unwrap();
        write_sequence(&mut buf, &[], 7).unwrap();
        assert_eq!(buf[6], 2);
        let seqs = read_sequences(&buf, Some(7)).unwrap();
        assert_eq!(seqs, vec![vec![1, 2, 65535], vec![70000, 3], vec![]]);
        assert!(read_sequences(&buf, Some(8)).is_err());
        assert!(read_sequences(&buf[..buf.len() - 1], None).is_err());
    }
}
