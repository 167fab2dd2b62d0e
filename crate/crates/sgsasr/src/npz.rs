//! Minimal NPY/NPZ support for `f64` arrays.
//!
//! Writes version-1.0 NPY records (little-endian `<f8`, C order) and bundles
//! them into stored (uncompressed) ZIP archives, the same single-file
//! container numpy's `savez` produces. Only the subset needed for parameter
//! persistence is implemented; archives are byte-deterministic so checkpoint
//! round-trips can be compared bit-for-bit.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// NPY
// ---------------------------------------------------------------------------

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Serialize an `f64` array as an NPY v1.0 record.
pub fn npy_bytes(arr: &ArrayD<f64>) -> Vec<u8> {
    let shape = arr
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape = if arr.ndim() == 1 {
        format!("({},)", shape)
    } else {
        format!("({})", shape)
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // pad so data starts on a 64-byte boundary, newline-terminated
    let unpadded = NPY_MAGIC.len() + 4 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(NPY_MAGIC.len() + 4 + header.len() + arr.len() * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let data = arr
        .as_slice()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| arr.iter().copied().collect());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse an NPY v1.x record holding a little-endian `f64` C-order array.
pub fn npy_parse(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let bad = |msg: &str| Error::Checkpoint(format!("npy: {msg}"));
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("bad magic"));
    }
    let major = bytes[6];
    if major != 1 {
        return Err(bad(&format!("unsupported npy version {major}")));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return Err(bad("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).map_err(|_| bad("non-utf8 header"))?;
    if !header.contains("'descr': '<f8'") {
        return Err(bad("expected little-endian f64 ('<f8')"));
    }
    if !header.contains("'fortran_order': False") {
        return Err(bad("expected C-order data"));
    }
    let open = header.find('(').ok_or_else(|| bad("missing shape"))?;
    let close = header[open..]
        .find(')')
        .ok_or_else(|| bad("missing shape"))?
        + open;
    let shape: Vec<usize> = header[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_>>()?;
    let numel: usize = shape.iter().product();
    let data_start = 10 + hlen;
    if bytes.len() != data_start + numel * 8 {
        return Err(bad(&format!(
            "data length {} does not match shape {:?}",
            bytes.len() - data_start,
            shape
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in bytes[data_start..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad("shape/data mismatch"))
}

// ---------------------------------------------------------------------------
// CRC-32 (IEEE, reflected) for the ZIP container
// ---------------------------------------------------------------------------

fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut c = !0u32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    !c
}

// ---------------------------------------------------------------------------
// NPZ (stored ZIP of NPY records)
// ---------------------------------------------------------------------------

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize named arrays into a stored-ZIP NPZ archive (insertion order).
pub fn npz_bytes<'a>(entries: impl IntoIterator<Item = (&'a str, &'a ArrayD<f64>)>) -> Vec<u8> {
    struct Central {
        name: Vec<u8>,
        crc: u32,
        size: u32,
        offset: u32,
    }
    let mut out = Vec::new();
    let mut central = Vec::new();
    for (name, arr) in entries {
        let fname = format!("{name}.npy").into_bytes();
        let payload = npy_bytes(arr);
        let crc = crc32(&payload);
        let offset = out.len() as u32;
        push_u32(&mut out, 0x0403_4b50);
        push_u16(&mut out, 20); // version needed
        push_u16(&mut out, 0); // flags
        push_u16(&mut out, 0); // method: stored
        push_u16(&mut out, 0); // mod time
        push_u16(&mut out, 0); // mod date
        push_u32(&mut out, crc);
        push_u32(&mut out, payload.len() as u32);
        push_u32(&mut out, payload.len() as u32);
        push_u16(&mut out, fname.len() as u16);
        push_u16(&mut out, 0); // extra len
        out.extend_from_slice(&fname);
        out.extend_from_slice(&payload);
        central.push(Central {
            name: fname,
            crc,
            size: payload.len() as u32,
            offset,
        });
    }
    let cd_offset = out.len() as u32;
    for c in &central {
        push_u32(&mut out, 0x0201_4b50);
        push_u16(&mut out, 20); // version made by
        push_u16(&mut out, 20); // version needed
        push_u16(&mut out, 0);
        push_u16(&mut out, 0);
        push_u16(&mut out, 0);
        push_u16(&mut out, 0);
        push_u32(&mut out, c.crc);
        push_u32(&mut out, c.size);
        push_u32(&mut out, c.size);
        push_u16(&mut out, c.name.len() as u16);
        push_u16(&mut out, 0);
        push_u16(&mut out, 0);
        push_u16(&mut out, 0);
        push_u16(&mut out, 0);
        push_u32(&mut out, 0);
        push_u32(&mut out, c.offset);
        out.extend_from_slice(&c.name);
    }
    let cd_size = out.len() as u32 - cd_offset;
    push_u32(&mut out, 0x0605_4b50);
    push_u16(&mut out, 0);
    push_u16(&mut out, 0);
    push_u16(&mut out, central.len() as u16);
    push_u16(&mut out, central.len() as u16);
    push_u32(&mut out, cd_size);
    push_u32(&mut out, cd_offset);
    push_u16(&mut out, 0);
    out
}

fn rd_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn rd_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parse a stored-ZIP NPZ archive into named arrays (archive order).
pub fn npz_parse(bytes: &[u8]) -> Result<IndexMap<String, ArrayD<f64>>> {
    let bad = |msg: String| Error::Checkpoint(format!("npz: {msg}"));
    // locate end-of-central-directory (no comment support needed, but scan anyway)
    let min_eocd = 22;
    if bytes.len() < min_eocd {
        return Err(bad("file too short".into()));
    }
    let scan_from = bytes.len().saturating_sub(min_eocd + 1024);
    let mut eocd = None;
    for at in (scan_from..=bytes.len() - min_eocd).rev() {
        if rd_u32(bytes, at) == 0x0605_4b50 {
            eocd = Some(at);
            break;
        }
    }
    let eocd = eocd.ok_or_else(|| bad("missing end-of-central-directory".into()))?;
    let n_entries = rd_u16(bytes, eocd + 10) as usize;
    let cd_offset = rd_u32(bytes, eocd + 16) as usize;

    let mut arrays = IndexMap::new();
    let mut at = cd_offset;
    for _ in 0..n_entries {
        if at + 46 > bytes.len() || rd_u32(bytes, at) != 0x0201_4b50 {
            return Err(bad("corrupt central directory".into()));
        }
        let method = rd_u16(bytes, at + 10);
        let crc = rd_u32(bytes, at + 16);
        let csize = rd_u32(bytes, at + 20) as usize;
        let name_len = rd_u16(bytes, at + 28) as usize;
        let extra_len = rd_u16(bytes, at + 30) as usize;
        let comment_len = rd_u16(bytes, at + 32) as usize;
        let local_offset = rd_u32(bytes, at + 42) as usize;
        let name = String::from_utf8(bytes[at + 46..at + 46 + name_len].to_vec())
            .map_err(|_| bad("non-utf8 entry name".into()))?;
        if method != 0 {
            return Err(bad(format!("entry {name}: only stored entries supported")));
        }
        // local header
        if local_offset + 30 > bytes.len() || rd_u32(bytes, local_offset) != 0x0403_4b50 {
            return Err(bad(format!("entry {name}: corrupt local header")));
        }
        let l_name = rd_u16(bytes, local_offset + 26) as usize;
        let l_extra = rd_u16(bytes, local_offset + 28) as usize;
        let data_start = local_offset + 30 + l_name + l_extra;
        if data_start + csize > bytes.len() {
            return Err(bad(format!("entry {name}: truncated data")));
        }
        let payload = &bytes[data_start..data_start + csize];
        if crc32(payload) != crc {
            return Err(bad(format!("entry {name}: checksum mismatch")));
        }
        let arr = npy_parse(payload)?;
        let key = name.strip_suffix(".npy").unwrap_or(&name).to_string();
        arrays.insert(key, arr);
        at += 46 + name_len + extra_len + comment_len;
    }
    Ok(arrays)
}

/// Write an NPZ archive to disk.
pub fn npz_write<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a ArrayD<f64>)>,
) -> Result<()> {
    let bytes = npz_bytes(entries);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read an NPZ archive from disk.
pub fn npz_read(path: &Path) -> Result<IndexMap<String, ArrayD<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    npz_parse(&bytes)
}
