//! On-disk chunked matrix containers.
//!
//! The intermediate-descriptor store ("QKIS") keeps frozen-backbone outputs
//! for the whole database as binary16, row-major, in fixed-size row chunks.
//! Dataset ("QKDS") and descriptor ("QKDV") files use the same header layout
//! with 32-bit floats and an extra id_base field that anchors row ids.
//!
//! All formats are little-endian. A store is immutable once written; readers
//! may share it freely.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{QkiError, Result};
use crate::half::{decode_half, encode_half};
use crate::numeric::Matrix;

pub const STORE_MAGIC: &[u8; 4] = b"QKIS";
pub const DATASET_MAGIC: &[u8; 4] = b"QKDS";
pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"QKDV";
const FORMAT_VERSION: u32 = 1;

// Offset of n_rows in both headers: magic + version.
const N_ROWS_OFFSET: u64 = 8;

/// SHA-256 over the given byte sections; used for store and dataset tags.
pub fn tag_from_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    hasher.finalize().into()
}

pub fn tag_hex(tag: &[u8; 32]) -> String {
    tag.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> QkiError {
    QkiError::io(path, e)
}

/// Handle to an on-disk binary16 intermediate-descriptor store.
#[derive(Debug, Clone)]
pub struct IntermediateStore {
    pub path: PathBuf,
    pub n_rows: u64,
    pub dim: u32,
    pub chunk_size: u32,
    pub source_tag: [u8; 32],
}

impl IntermediateStore {
    pub fn n_chunks(&self) -> usize {
        if self.n_rows == 0 {
            0
        } else {
            self.n_rows.div_ceil(self.chunk_size as u64) as usize
        }
    }

    /// Number of rows in chunk `idx` (the last chunk may be short).
    pub fn chunk_rows(&self, idx: usize) -> usize {
        let start = idx as u64 * self.chunk_size as u64;
        (self.n_rows - start).min(self.chunk_size as u64) as usize
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = File::open(&path).map_err(|e| io_err(&path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| io_err(&path, e))?;
        if &magic != STORE_MAGIC {
            return Err(QkiError::Data(format!(
                "{}: bad magic {magic:?}, expected QKIS",
                path.display()
            )));
        }
        let version = read_u32(&mut r, &path)?;
        if version != FORMAT_VERSION {
            return Err(QkiError::Data(format!(
                "{}: unsupported store version {version}",
                path.display()
            )));
        }
        let n_rows = read_u64(&mut r, &path)?;
        let dim = read_u32(&mut r, &path)?;
        let chunk_size = read_u32(&mut r, &path)?;
        if chunk_size == 0 {
            return Err(QkiError::Data(format!(
                "{}: chunk_size must be >= 1",
                path.display()
            )));
        }
        let mut source_tag = [0u8; 32];
        r.read_exact(&mut source_tag).map_err(|e| io_err(&path, e))?;
        Ok(IntermediateStore {
            path,
            n_rows,
            dim,
            chunk_size,
            source_tag,
        })
    }

    /// Decode one chunk into 64-bit values. Repeated reads are identical.
    pub fn read_chunk(&self, chunk_index: usize) -> Result<Matrix> {
        if chunk_index >= self.n_chunks() {
            return Err(QkiError::Data(format!(
                "chunk index {chunk_index} out of range ({} chunks in {})",
                self.n_chunks(),
                self.path.display()
            )));
        }
        let rows = self.chunk_rows(chunk_index);
        let dim = self.dim as usize;
        let mut file = File::open(&self.path).map_err(|e| io_err(&self.path, e))?;
        let offset = 56 + chunk_index as u64 * self.chunk_size as u64 * dim as u64 * 2;
        file.seek(SeekFrom::Start(offset))
            .map_err(|e| io_err(&self.path, e))?;
        let mut buf = vec![0u8; rows * dim * 2];
        file.read_exact(&mut buf).map_err(|e| io_err(&self.path, e))?;
        let mut m = Matrix::zeros(rows, dim);
        for (i, chunk) in buf.chunks_exact(2).enumerate() {
            m.data[i] = decode_half(u16::from_le_bytes([chunk[0], chunk[1]]));
        }
        Ok(m)
    }

    /// All chunks concatenated in order.
    pub fn load_all(&self) -> Result<Matrix> {
        let dim = self.dim as usize;
        let mut m = Matrix::zeros(self.n_rows as usize, dim);
        let mut row = 0;
        for c in 0..self.n_chunks() {
            let chunk = self.read_chunk(c)?;
            m.data[row * dim..(row + chunk.rows) * dim].copy_from_slice(&chunk.data);
            row += chunk.rows;
        }
        Ok(m)
    }
}

/// Streaming writer for QKIS files. Rows are encoded to binary16 as they
/// arrive; `finish` patches the row count into the header.
pub struct StoreWriter {
    path: PathBuf,
    writer: BufWriter<File>,
    dim: u32,
    chunk_size: u32,
    source_tag: [u8; 32],
    n_rows: u64,
}

impl StoreWriter {
    pub fn create(
        path: impl Into<PathBuf>,
        dim: u32,
        chunk_size: u32,
        source_tag: [u8; 32],
    ) -> Result<Self> {
        if chunk_size == 0 {
            return Err(QkiError::Config("store chunk_size must be >= 1".into()));
        }
        if dim == 0 {
            return Err(QkiError::Config("store dimension must be >= 1".into()));
        }
        let path = path.into();
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut writer = BufWriter::new(file);
        let mut header = Vec::with_capacity(56);
        header.extend_from_slice(STORE_MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes()); // n_rows, patched later
        header.extend_from_slice(&dim.to_le_bytes());
        header.extend_from_slice(&chunk_size.to_le_bytes());
        header.extend_from_slice(&source_tag);
        writer.write_all(&header).map_err(|e| io_err(&path, e))?;
        Ok(StoreWriter {
            path,
            writer,
            dim,
            chunk_size,
            source_tag,
            n_rows: 0,
        })
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim as usize {
            return Err(QkiError::Data(format!(
                "row {} has dimension {}, store expects {}",
                self.n_rows,
                row.len(),
                self.dim
            )));
        }
        let mut buf = Vec::with_capacity(row.len() * 2);
        for (j, &v) in row.iter().enumerate() {
            let bits = encode_half(v).map_err(|e| {
                QkiError::Data(format!("row {} column {j}: {e}", self.n_rows))
            })?;
            buf.extend_from_slice(&bits.to_le_bytes());
        }
        self.writer.write_all(&buf).map_err(|e| io_err(&self.path, e))?;
        self.n_rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<IntermediateStore> {
        self.writer.flush().map_err(|e| io_err(&self.path, e))?;
        let mut file = self.writer.into_inner().map_err(|e| {
            QkiError::Data(format!("{}: flush failed: {e}", self.path.display()))
        })?;
        file.seek(SeekFrom::Start(N_ROWS_OFFSET))
            .map_err(|e| io_err(&self.path, e))?;
        file.write_all(&self.n_rows.to_le_bytes())
            .map_err(|e| io_err(&self.path, e))?;
        file.sync_all().map_err(|e| io_err(&self.path, e))?;
        Ok(IntermediateStore {
            path: self.path,
            n_rows: self.n_rows,
            dim: self.dim,
            chunk_size: self.chunk_size,
            source_tag: self.source_tag,
        })
    }
}

/// Write a store from a row iterator. Overwrites any existing file at `path`.
pub fn store_write<I>(
    rows: I,
    dim: u32,
    chunk_size: u32,
    source_tag: [u8; 32],
    path: impl Into<PathBuf>,
) -> Result<IntermediateStore>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = StoreWriter::create(path, dim, chunk_size, source_tag)?;
    for row in rows {
        w.push_row(&row)?;
    }
    w.finish()
}

/// Header of a 32-bit dataset or descriptor file.
#[derive(Debug, Clone)]
pub struct DatasetHeader {
    pub n_rows: u64,
    pub dim: u32,
    pub chunk_size: u32,
    pub source_tag: [u8; 32],
    /// Row `r` of the file carries id `id_base + r`.
    pub id_base: u64,
}

/// Write a QKDS/QKDV file (32-bit floats) in one pass.
pub fn write_f32_file(
    path: impl Into<PathBuf>,
    magic: &[u8; 4],
    data: &Matrix,
    chunk_size: u32,
    source_tag: [u8; 32],
    id_base: u64,
) -> Result<()> {
    let path = path.into();
    if chunk_size == 0 {
        return Err(QkiError::Config("chunk_size must be >= 1".into()));
    }
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(magic).map_err(|e| io_err(&path, e))?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(|e| io_err(&path, e))?;
    w.write_all(&(data.rows as u64).to_le_bytes())
        .map_err(|e| io_err(&path, e))?;
    w.write_all(&(data.cols as u32).to_le_bytes())
        .map_err(|e| io_err(&path, e))?;
    w.write_all(&chunk_size.to_le_bytes())
        .map_err(|e| io_err(&path, e))?;
    w.write_all(&source_tag).map_err(|e| io_err(&path, e))?;
    w.write_all(&id_base.to_le_bytes())
        .map_err(|e| io_err(&path, e))?;
    for (i, &v) in data.data.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() && v.is_finite() {
            return Err(QkiError::Data(format!(
                "value {v} at flat index {i} overflows 32-bit storage"
            )));
        }
        w.write_all(&f.to_le_bytes()).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Read a QKDS/QKDV file fully into memory.
pub fn read_f32_file(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<(DatasetHeader, Matrix)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(|e| io_err(path, e))?;
    if &got != magic {
        return Err(QkiError::Data(format!(
            "{}: bad magic {got:?}, expected {:?}",
            path.display(),
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(QkiError::Data(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n_rows = read_u64(&mut r, path)?;
    let dim = read_u32(&mut r, path)?;
    let chunk_size = read_u32(&mut r, path)?;
    let mut source_tag = [0u8; 32];
    r.read_exact(&mut source_tag).map_err(|e| io_err(path, e))?;
    let id_base = read_u64(&mut r, path)?;
    let mut m = Matrix::zeros(n_rows as usize, dim as usize);
    let mut buf = vec![0u8; n_rows as usize * dim as usize * 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        m.data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
    }
    Ok((
        DatasetHeader {
            n_rows,
            dim,
            chunk_size,
            source_tag,
            id_base,
        },
        m,
    ))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
    Ok(u64::from_le_bytes(b))
}
