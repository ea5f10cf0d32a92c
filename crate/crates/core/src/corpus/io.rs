use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CorpusError, FeatureSequence, QuerySpec};
use crate::numkernel::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"RVFF";
pub const QUERY_MAGIC: [u8; 4] = *b"RVQF";
pub const FORMAT_VERSION: u16 = 1;

// Header: magic | version u16 | dim u32 | count u64 | fps f32, all little-endian.
// In query files `count` is the record count and `fps` is written as 0.

fn write_header<W: Write>(w: &mut W, magic: [u8; 4], dim: usize, count: u64, fps: f32) -> Result<(), CorpusError> {
    w.write_all(&magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&fps.to_le_bytes())?;
    Ok(())
}

struct Header {
    dim: usize,
    count: u64,
    fps: f32,
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N], CorpusError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CorpusError::CorruptPayload(format!("truncated {what}")),
        _ => CorpusError::Io(e),
    })?;
    Ok(buf)
}

fn read_header<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<Header, CorpusError> {
    let found: [u8; 4] = read_exact(r, "magic")?;
    if found != magic {
        return Err(CorpusError::BadMagic { expected: magic, found });
    }
    let version = u16::from_le_bytes(read_exact(r, "header")?);
    if version != FORMAT_VERSION {
        return Err(CorpusError::VersionUnsupported(version));
    }
    let dim = u32::from_le_bytes(read_exact(r, "header")?) as usize;
    let count = u64::from_le_bytes(read_exact(r, "header")?);
    let fps = f32::from_le_bytes(read_exact(r, "header")?);
    if dim == 0 {
        return Err(CorpusError::CorruptPayload("zero dimension".into()));
    }
    Ok(Header { dim, count, fps })
}

fn narrow(v: f64) -> Result<f32, CorpusError> {
    let n = v as f32;
    if n.is_finite() {
        Ok(n)
    } else {
        Err(CorpusError::CorruptPayload(format!("value {v} does not fit a 32-bit real")))
    }
}

fn write_payload<W: Write>(w: &mut W, m: &Matrix) -> Result<(), CorpusError> {
    for &v in m.data() {
        w.write_all(&narrow(v)?.to_le_bytes())?;
    }
    Ok(())
}

fn read_payload<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix, CorpusError> {
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CorpusError::CorruptPayload("payload size overflows".into()))?;
    let mut bytes = Vec::new();
    r.take(n as u64).read_to_end(&mut bytes)?;
    if bytes.len() != n {
        return Err(CorpusError::CorruptPayload(format!("expected {n} payload bytes, found {}", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Matrix::new(rows, cols, data).map_err(|e| CorpusError::CorruptPayload(e.to_string()))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<(), CorpusError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String, CorpusError> {
    let len = u32::from_le_bytes(read_exact(r, "string length")?) as usize;
    let mut bytes = Vec::new();
    r.take(len as u64).read_to_end(&mut bytes)?;
    if bytes.len() != len {
        return Err(CorpusError::CorruptPayload("truncated string".into()));
    }
    String::from_utf8(bytes).map_err(|e| CorpusError::CorruptPayload(e.to_string()))
}

fn ensure_eof<R: Read>(r: &mut R) -> Result<(), CorpusError> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(CorpusError::CorruptPayload("trailing bytes after payload".into())),
    }
}

/// Writes an RVFF file. Values are stored as 32-bit reals, so the round
/// trip is bit-exact for values representable in 32 bits.
pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FEATURE_MAGIC, seq.dim(), seq.len() as u64, narrow(seq.fps)?)?;
    write_payload(&mut w, &seq.frames)?;
    w.flush()?;
    Ok(())
}

/// Reads an RVFF file; the video id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSequence, CorpusError> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, FEATURE_MAGIC)?;
    if h.count == 0 {
        return Err(CorpusError::CorruptPayload("zero frames".into()));
    }
    let frames = read_payload(&mut r, h.count as usize, h.dim)?;
    ensure_eof(&mut r)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    FeatureSequence::new(id, h.fps as f64, frames).map_err(|e| CorpusError::CorruptPayload(e.to_string()))
}

pub fn write_queries(queries: &[QuerySpec], dim: usize, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, QUERY_MAGIC, dim, queries.len() as u64, 0.0)?;
    for q in queries {
        if q.embedding.cols() != dim {
            return Err(CorpusError::DimMismatch { expected: dim, got: q.embedding.cols() });
        }
        write_string(&mut w, &q.query_id)?;
        write_string(&mut w, &q.video_id)?;
        w.write_all(&(q.words() as u32).to_le_bytes())?;
        let (s, e) = q.span.unwrap_or((f64::NAN, f64::NAN));
        w.write_all(&s.to_le_bytes())?;
        w.write_all(&e.to_le_bytes())?;
        write_payload(&mut w, &q.embedding)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the queries and their shared embedding dimension.
pub fn read_queries(path: &Path) -> Result<(Vec<QuerySpec>, usize), CorpusError> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, QUERY_MAGIC)?;
    let mut out = Vec::new();
    for _ in 0..h.count {
        let query_id = read_string(&mut r)?;
        let video_id = read_string(&mut r)?;
        let words = u32::from_le_bytes(read_exact(&mut r, "record")?) as usize;
        if words == 0 {
            return Err(CorpusError::CorruptPayload(format!("query {query_id} has no words")));
        }
        let s = f64::from_le_bytes(read_exact(&mut r, "record")?);
        let e = f64::from_le_bytes(read_exact(&mut r, "record")?);
        let span = if s.is_nan() || e.is_nan() { None } else { Some((s, e)) };
        let embedding = read_payload(&mut r, words, h.dim)?;
        out.push(QuerySpec { query_id, video_id, embedding, span });
    }
    ensure_eof(&mut r)?;
    Ok((out, h.dim))
}
