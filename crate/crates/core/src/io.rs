//! File formats: `Γ` as CSV with a JSON sidecar, binary frame stacks, frame
//! CSV and accumulator checkpoints.
//!
//! Frame stack layout (little-endian): magic `PPFR`, version `u16`, pixel
//! count `u32`, frame count `u64`, kind `u8` (0 binary, 1 gray), then one
//! record per frame: `N` `f64` values for gray frames, or `N` bits packed
//! least-significant-bit first and padded to a whole byte for binary frames.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accumulate::{Layout, MomentAccumulator};
use crate::model::{JointDistribution, ModelError, PixelGrid};
use crate::sim::{Frame, FrameKind};

pub const STACK_MAGIC: [u8; 4] = *b"PPFR";
pub const STACK_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Stream(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("checksum mismatch: sidecar says {expected}, file hashes to {found}")]
    Checksum { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn at(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `Write` sink that hashes everything written through it.
#[derive(Default)]
pub struct HashingWriter {
    hasher: Sha256,
    written: u64,
}

impl HashingWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes_written(&self) -> u64 {
        self.written
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

impl Write for HashingWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.hasher.update(buf);
        self.written += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Matrix as CSV text: one row per line, comma separated, no header.
pub fn matrix_to_csv(m: &Array2<f64>) -> Result<Vec<u8>, IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.into_inner().map_err(|e| IoError::Format(e.to_string()))
}

pub fn matrix_from_csv<R: Read>(reader: R) -> Result<Array2<f64>, IoError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in r.records() {
        let record = record?;
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(IoError::Format(format!(
                    "row {} has {} columns, expected {c}",
                    rows + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for field in record.iter() {
            values.push(field.trim().parse::<f64>().map_err(|e| {
                IoError::Format(format!("row {}: {field:?}: {e}", rows + 1))
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), values)
        .map_err(|e| IoError::Format(e.to_string()))
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<String, IoError> {
    let bytes = matrix_to_csv(m)?;
    std::fs::write(path, &bytes).map_err(at(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>, IoError> {
    matrix_from_csv(File::open(path).map_err(at(path))?)
}

/// JSON sidecar describing a `Γ` CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSidecar {
    pub n_pixels: usize,
    pub pitch_um: f64,
    pub origin_um: f64,
    /// SHA-256 of the CSV bytes, hex encoded.
    pub checksum: String,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `Γ` to `csv_path` and its sidecar next to it (same stem, `.json`).
pub fn save_joint_distribution(csv_path: &Path, jd: &JointDistribution) -> Result<GammaSidecar, IoError> {
    let checksum = write_matrix_csv(csv_path, jd.matrix())?;
    let grid = jd.grid();
    let sidecar = GammaSidecar {
        n_pixels: grid.n_pixels,
        pitch_um: grid.pitch_um,
        origin_um: grid.origin_um,
        checksum,
    };
    let side = sidecar_path(csv_path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(at(&side))?;
    Ok(sidecar)
}

/// Reads `Γ`; the sidecar supplies the grid and checksum when present,
/// otherwise `fallback_grid` (or unit pitch) is used.
pub fn load_joint_distribution(
    csv_path: &Path,
    fallback_grid: Option<&PixelGrid>,
) -> Result<JointDistribution, IoError> {
    let bytes = std::fs::read(csv_path).map_err(at(csv_path))?;
    let matrix = matrix_from_csv(&bytes[..])?;
    let (rows, cols) = matrix.dim();
    if rows != cols || rows == 0 {
        return Err(IoError::Format(format!("Γ must be square and non-empty, got {rows}×{cols}")));
    }
    let side = sidecar_path(csv_path);
    let grid = if side.exists() {
        let sidecar: GammaSidecar =
            serde_json::from_slice(&std::fs::read(&side).map_err(at(&side))?)?;
        let found = sha256_hex(&bytes);
        if found != sidecar.checksum {
            return Err(IoError::Checksum {
                expected: sidecar.checksum,
                found,
            });
        }
        if sidecar.n_pixels != rows {
            return Err(IoError::Format(format!(
                "sidecar says {} pixels, CSV has {rows}",
                sidecar.n_pixels
            )));
        }
        PixelGrid::new(sidecar.n_pixels, sidecar.pitch_um, sidecar.origin_um)?
    } else {
        match fallback_grid {
            Some(g) if g.n_pixels == rows => g.clone(),
            Some(g) => {
                return Err(IoError::Format(format!(
                    "grid has {} pixels, CSV has {rows}",
                    g.n_pixels
                )))
            }
            None => PixelGrid::centered(rows, 1.0)?,
        }
    };
    Ok(JointDistribution::new(grid, matrix)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackHeader {
    pub version: u16,
    pub n_pixels: u32,
    pub n_frames: u64,
    pub kind: FrameKind,
}

impl StackHeader {
    pub fn record_len(&self) -> usize {
        let n = self.n_pixels as usize;
        match self.kind {
            FrameKind::Gray => 8 * n,
            FrameKind::Binary => n.div_ceil(8),
        }
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&STACK_MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.n_pixels.to_le_bytes());
        b[10..18].copy_from_slice(&self.n_frames.to_le_bytes());
        b[18] = match self.kind {
            FrameKind::Binary => 0,
            FrameKind::Gray => 1,
        };
        b
    }

    fn from_bytes(b: &[u8; HEADER_LEN]) -> Result<Self, IoError> {
        if b[0..4] != STACK_MAGIC {
            return Err(IoError::Format("not a frame stack (bad magic)".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != STACK_VERSION {
            return Err(IoError::Format(format!("unsupported stack version {version}")));
        }
        let kind = match b[18] {
            0 => FrameKind::Binary,
            1 => FrameKind::Gray,
            k => return Err(IoError::Format(format!("unknown frame kind {k}"))),
        };
        Ok(Self {
            version,
            n_pixels: u32::from_le_bytes(b[6..10].try_into().expect("4 bytes")),
            n_frames: u64::from_le_bytes(b[10..18].try_into().expect("8 bytes")),
            kind,
        })
    }
}

/// Streams frames into the binary stack format. The frame count is fixed up
/// front and checked on [`StackWriter::finish`].
pub struct StackWriter<W: Write> {
    inner: W,
    header: StackHeader,
    written: u64,
    buffer: Vec<u8>,
}

impl<W: Write> StackWriter<W> {
    pub fn new(mut inner: W, kind: FrameKind, n_pixels: usize, n_frames: u64) -> Result<Self, IoError> {
        let n_pixels = u32::try_from(n_pixels)
            .map_err(|_| IoError::Format(format!("{n_pixels} pixels do not fit the header")))?;
        let header = StackHeader {
            version: STACK_VERSION,
            n_pixels,
            n_frames,
            kind,
        };
        inner.write_all(&header.to_bytes())?;
        Ok(Self {
            inner,
            header,
            written: 0,
            buffer: Vec::with_capacity(header.record_len()),
        })
    }

    pub fn write_frame(&mut self, frame: &Frame) -> Result<(), IoError> {
        if frame.kind != self.header.kind || frame.len() != self.header.n_pixels as usize {
            return Err(IoError::Format(format!(
                "frame {:?}/{} does not match stack {:?}/{}",
                frame.kind,
                frame.len(),
                self.header.kind,
                self.header.n_pixels
            )));
        }
        if self.written == self.header.n_frames {
            return Err(IoError::Format("more frames than declared in the header".into()));
        }
        self.buffer.clear();
        match frame.kind {
            FrameKind::Gray => {
                for v in &frame.values {
                    self.buffer.extend_from_slice(&v.to_le_bytes());
                }
            }
            FrameKind::Binary => {
                self.buffer.resize(self.header.record_len(), 0);
                for (i, &v) in frame.values.iter().enumerate() {
                    if v != 0.0 {
                        self.buffer[i / 8] |= 1 << (i % 8);
                    }
                }
            }
        }
        self.inner.write_all(&self.buffer)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, IoError> {
        if self.written != self.header.n_frames {
            return Err(IoError::Format(format!(
                "header declares {} frames, {} written",
                self.header.n_frames, self.written
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Iterates the frames of a binary stack.
pub struct StackReader<R: Read> {
    inner: R,
    header: StackHeader,
    read: u64,
    buffer: Vec<u8>,
}

impl<R: Read> StackReader<R> {
    pub fn new(mut inner: R) -> Result<Self, IoError> {
        let mut b = [0u8; HEADER_LEN];
        inner
            .read_exact(&mut b)
            .map_err(|e| IoError::Format(format!("truncated stack header: {e}")))?;
        let header = StackHeader::from_bytes(&b)?;
        Ok(Self {
            inner,
            header,
            read: 0,
            buffer: vec![0; header.record_len()],
        })
    }

    pub fn header(&self) -> StackHeader {
        self.header
    }

    pub fn read_frame(&mut self) -> Result<Option<Frame>, IoError> {
        if self.read == self.header.n_frames {
            return Ok(None);
        }
        self.inner.read_exact(&mut self.buffer).map_err(|e| {
            IoError::Format(format!("stack truncated at frame {}: {e}", self.read))
        })?;
        self.read += 1;
        let n = self.header.n_pixels as usize;
        let values = match self.header.kind {
            FrameKind::Gray => self
                .buffer
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            FrameKind::Binary => (0..n)
                .map(|i| f64::from((self.buffer[i / 8] >> (i % 8)) & 1))
                .collect(),
        };
        Ok(Some(Frame {
            kind: self.header.kind,
            values,
        }))
    }
}

impl<R: Read> Iterator for StackReader<R> {
    type Item = Result<Frame, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_frame().transpose()
    }
}

pub fn open_stack(path: &Path) -> Result<StackReader<BufReader<File>>, IoError> {
    StackReader::new(BufReader::new(File::open(path).map_err(at(path))?))
}

pub fn create_stack(
    path: &Path,
    kind: FrameKind,
    n_pixels: usize,
    n_frames: u64,
) -> Result<StackWriter<BufWriter<File>>, IoError> {
    StackWriter::new(
        BufWriter::new(File::create(path).map_err(at(path))?),
        kind,
        n_pixels,
        n_frames,
    )
}

/// Frames as CSV, one frame per row.
pub fn write_frames_csv<'a, W: Write>(
    writer: W,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for f in frames {
        w.write_record(f.values.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Header of an accumulator checkpoint; the sums follow in a blob of
/// little-endian `f64` in the order `sum_x`, `sum_sq`, `sum_xx` (row-major),
/// `sum_x_next` (row-major), first frame, last frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layout: Layout,
    pub n_frames: u64,
    pub has_first_frame: bool,
    pub has_last_frame: bool,
    pub blob_len: usize,
    pub blob_checksum: String,
}

/// Writes `<base>.json` and `<base>.f64`.
pub fn save_checkpoint(base: &Path, acc: &MomentAccumulator) -> Result<CheckpointHeader, IoError> {
    let mut blob = Vec::new();
    let mut put = |vals: &mut dyn Iterator<Item = f64>| {
        for v in vals {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&mut acc.sum_x().iter().copied());
    put(&mut acc.sum_sq().iter().copied());
    put(&mut acc.sum_xx().iter().copied());
    put(&mut acc.sum_x_next().iter().copied());
    for f in [acc.first_frame(), acc.last_frame()].into_iter().flatten() {
        put(&mut f.iter().copied());
    }
    let header = CheckpointHeader {
        layout: acc.layout(),
        n_frames: acc.n_frames(),
        has_first_frame: acc.first_frame().is_some(),
        has_last_frame: acc.last_frame().is_some(),
        blob_len: blob.len(),
        blob_checksum: sha256_hex(&blob),
    };
    let (json, bin) = (base.with_extension("json"), base.with_extension("f64"));
    std::fs::write(&json, serde_json::to_vec_pretty(&header)?).map_err(at(&json))?;
    std::fs::write(&bin, &blob).map_err(at(&bin))?;
    Ok(header)
}

pub fn load_checkpoint(base: &Path) -> Result<MomentAccumulator, IoError> {
    let (json, bin) = (base.with_extension("json"), base.with_extension("f64"));
    let header: CheckpointHeader = serde_json::from_slice(&std::fs::read(&json).map_err(at(&json))?)?;
    let blob = std::fs::read(&bin).map_err(at(&bin))?;
    if blob.len() != header.blob_len {
        return Err(IoError::Format(format!(
            "checkpoint blob has {} bytes, header says {}",
            blob.len(),
            header.blob_len
        )));
    }
    let found = sha256_hex(&blob);
    if found != header.blob_checksum {
        return Err(IoError::Checksum {
            expected: header.blob_checksum,
            found,
        });
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let len = header.layout.frame_len();
    let shape = header.layout.corr_shape();
    let mut take = |k: usize| -> Result<Vec<f64>, IoError> {
        let v: Vec<f64> = values.by_ref().take(k).collect();
        if v.len() == k {
            Ok(v)
        } else {
            Err(IoError::Format("checkpoint blob too short".into()))
        }
    };
    let sum_x = take(len)?;
    let sum_sq = take(len)?;
    let to_matrix = |v: Vec<f64>| {
        Array2::from_shape_vec(shape, v).map_err(|e| IoError::Format(e.to_string()))
    };
    let sum_xx = to_matrix(take(shape.0 * shape.1)?)?;
    let sum_x_next = to_matrix(take(shape.0 * shape.1)?)?;
    let first = if header.has_first_frame { Some(take(len)?) } else { None };
    let last = if header.has_last_frame { Some(take(len)?) } else { None };
    MomentAccumulator::from_parts(
        header.layout,
        header.n_frames,
        sum_x,
        sum_sq,
        sum_xx,
        sum_x_next,
        first,
        last,
    )
    .map_err(|e| IoError::Format(e.to_string()))
}
