//! Memory-mapped on-disk matrices with chunked row access, plus out-of-core
//! `XᵀX`, `XᵀY` and chunk-parallel matrix products.
//!
//! File layout (little-endian): `"GBA1"`, `u32` version, `u64` rows,
//! `u64` cols, `u64` chunk_rows, then `rows * cols` `f64` values row-major.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use memmap2::MmapOptions;

use crate::error::{Error, Result};
use crate::linalg::{gram_accumulate, matmul, shifted_solve, xty_accumulate};
use crate::mat::Mat;
use crate::rls::{RlsModel, Solution};

pub const MAGIC: [u8; 4] = *b"GBA1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;
/// Target chunk size used by [`default_chunk_rows`].
pub const DEFAULT_CHUNK_BYTES: u64 = 64 << 20;

/// Rows per chunk so that one chunk is about [`DEFAULT_CHUNK_BYTES`].
pub fn default_chunk_rows(cols: usize) -> usize {
    (DEFAULT_CHUNK_BYTES / (cols.max(1) as u64 * 8)).max(1) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub rows: u64,
    pub cols: u64,
    pub chunk_rows: u64,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; 32] {
        let mut b = [0u8; 32];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        b[8..16].copy_from_slice(&self.rows.to_le_bytes());
        b[16..24].copy_from_slice(&self.cols.to_le_bytes());
        b[24..32].copy_from_slice(&self.chunk_rows.to_le_bytes());
        b
    }

    fn body_len(&self, path: &Path) -> Result<u64> {
        self.rows
            .checked_mul(self.cols)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: format!("dimensions {}x{} overflow", self.rows, self.cols),
            })
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.chunk_rows == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "rows, cols and chunk_rows must be >= 1 (got {}, {}, {})",
                    self.rows, self.cols, self.chunk_rows
                ),
            });
        }
        self.body_len(path).map(|_| ())
    }
}

/// Handle to a bigarray file. Chunks are mapped on demand, one at a time.
#[derive(Debug)]
pub struct BigArray {
    path: PathBuf,
    file: File,
    header: Header,
    mode: Mode,
}

impl BigArray {
    /// Creates a zero-filled array, replacing any existing file.
    pub fn create(path: impl AsRef<Path>, rows: usize, cols: usize, chunk_rows: usize) -> Result<Self> {
        let path = path.as_ref();
        let header = Header {
            rows: rows as u64,
            cols: cols as u64,
            chunk_rows: chunk_rows as u64,
        };
        header.validate(path)?;
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.write_all(&header.to_bytes()).map_err(|e| Error::io(path, e))?;
        file.set_len(HEADER_LEN + header.body_len(path)?)
            .map_err(|e| Error::io(path, e))?;
        Ok(BigArray {
            path: path.to_path_buf(),
            file,
            header,
            mode: Mode::Write,
        })
    }

    /// Opens an existing array read-only.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_mode(path.as_ref(), Mode::Read)
    }

    /// Opens an existing array for reading and writing.
    pub fn open_rw(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_mode(path.as_ref(), Mode::Write)
    }

    fn open_mode(path: &Path, mode: Mode) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(mode == Mode::Write)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let header = read_header(&mut file, path)?;
        let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let expected = HEADER_LEN + header.body_len(path)?;
        if actual != expected {
            return Err(Error::Corruption {
                path: path.to_path_buf(),
                detail: format!("file is {actual} bytes, header implies {expected}"),
            });
        }
        Ok(BigArray {
            path: path.to_path_buf(),
            file,
            header,
            mode,
        })
    }

    /// Writes `m` to a new file.
    pub fn from_mat(path: impl AsRef<Path>, m: &Mat, chunk_rows: usize) -> Result<Self> {
        let ba = Self::create(path, m.rows(), m.cols(), chunk_rows)?;
        for i in 0..ba.n_chunks() {
            let (start, len) = ba.chunk_span(i);
            ba.write_chunk(i, &m.row_range(start, start + len))?;
        }
        Ok(ba)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> Header {
        self.header
    }

    pub fn rows(&self) -> usize {
        self.header.rows as usize
    }

    pub fn cols(&self) -> usize {
        self.header.cols as usize
    }

    pub fn chunk_rows(&self) -> usize {
        self.header.chunk_rows as usize
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn n_chunks(&self) -> usize {
        self.rows().div_ceil(self.chunk_rows())
    }

    /// First row and row count of chunk `i` (no bounds check).
    pub fn chunk_span(&self, i: usize) -> (usize, usize) {
        let start = i * self.chunk_rows();
        (start, self.chunk_rows().min(self.rows() - start))
    }

    fn check_index(&self, i: usize) -> Result<(usize, usize)> {
        if i >= self.n_chunks() {
            return Err(Error::Parameter(format!(
                "chunk index {i} out of range for {} chunks in {}",
                self.n_chunks(),
                self.path.display()
            )));
        }
        Ok(self.chunk_span(i))
    }

    fn byte_range(&self, start: usize, len: usize) -> (u64, usize) {
        let row_bytes = self.cols() as u64 * 8;
        (HEADER_LEN + start as u64 * row_bytes, len * self.cols() * 8)
    }

    /// Reads rows `[i·chunk_rows, min((i+1)·chunk_rows, rows))`.
    pub fn read_chunk(&self, i: usize) -> Result<Mat> {
        let (start, len) = self.check_index(i)?;
        let (offset, nbytes) = self.byte_range(start, len);
        // SAFETY: the mapping is read-only and dropped before returning; the
        // file is not truncated while the handle exists.
        let map = unsafe { MmapOptions::new().offset(offset).len(nbytes).map(&self.file) }
            .map_err(|e| Error::io(&self.path, e))?;
        let data: Vec<f64> = map
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Mat::from_vec(len, self.cols(), data)
    }

    /// Overwrites chunk `i` with `m`, which must have exactly the chunk's shape.
    pub fn write_chunk(&self, i: usize, m: &Mat) -> Result<()> {
        if self.mode != Mode::Write {
            return Err(Error::State(format!("{} is open read-only", self.path.display())));
        }
        let (start, len) = self.check_index(i)?;
        if m.shape() != (len, self.cols()) {
            return Err(Error::shape(
                "write_chunk",
                format!("chunk {i} is {len}x{}, got {:?}", self.cols(), m.shape()),
            ));
        }
        let (offset, nbytes) = self.byte_range(start, len);
        // SAFETY: concurrent writers only ever map disjoint chunk regions.
        let mut map = unsafe { MmapOptions::new().offset(offset).len(nbytes).map_mut(&self.file) }
            .map_err(|e| Error::io(&self.path, e))?;
        for (dst, v) in map.chunks_exact_mut(8).zip(m.as_slice()) {
            dst.copy_from_slice(&v.to_le_bytes());
        }
        map.flush().map_err(|e| Error::io(&self.path, e))
    }

    /// Loads the whole array into memory.
    pub fn to_mat(&self) -> Result<Mat> {
        let mut data = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.n_chunks() {
            data.extend_from_slice(self.read_chunk(i)?.as_slice());
        }
        Mat::from_vec(self.rows(), self.cols(), data)
    }
}

/// Reads and validates the header at the start of `file`.
pub fn read_header(file: &mut File, path: &Path) -> Result<Header> {
    let mut b = [0u8; 32];
    let mut got = 0;
    while got < b.len() {
        match file.read(&mut b[got..]).map_err(|e| Error::io(path, e))? {
            0 => break,
            k => got += k,
        }
    }
    if got < 4 || b[0..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "missing GBA1 magic".into(),
        });
    }
    if got < 32 {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            detail: format!("header truncated to {got} bytes"),
        });
    }
    let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version as u64,
            expected: FORMAT_VERSION as u64,
        });
    }
    let header = Header {
        rows: u64_at(8),
        cols: u64_at(16),
        chunk_rows: u64_at(24),
    };
    header.validate(path)?;
    Ok(header)
}

/// Largest square matrix allowed in memory during out-of-core operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryBudget {
    pub max_square_dim: usize,
}

impl MemoryBudget {
    pub fn new(max_square_dim: usize) -> Self {
        MemoryBudget { max_square_dim }
    }

    /// Budget allowing one `m x m` matrix within `bytes`.
    pub fn from_bytes(bytes: u64) -> Self {
        MemoryBudget {
            max_square_dim: ((bytes / 8) as f64).sqrt().floor() as usize,
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if dim > self.max_square_dim {
            return Err(Error::Budget {
                required: dim,
                available: self.max_square_dim,
            });
        }
        Ok(())
    }
}

impl Default for MemoryBudget {
    fn default() -> Self {
        Self::from_bytes(1 << 30)
    }
}

/// `XᵀX`, accumulated chunk by chunk in ascending order.
pub fn ooc_gram(x: &BigArray, budget: MemoryBudget) -> Result<Mat> {
    budget.check(x.cols())?;
    let mut acc = Mat::zeros(x.cols(), x.cols());
    for i in 0..x.n_chunks() {
        gram_accumulate(&mut acc, &x.read_chunk(i)?)?;
    }
    Ok(acc)
}

/// `XᵀY`, accumulated chunk by chunk in ascending order.
pub fn ooc_xty(x: &BigArray, y: &BigArray, budget: MemoryBudget) -> Result<Mat> {
    if x.rows() != y.rows() || x.chunk_rows() != y.chunk_rows() {
        return Err(Error::shape(
            "ooc_xty",
            format!(
                "x has {} rows in chunks of {}, y has {} rows in chunks of {}",
                x.rows(),
                x.chunk_rows(),
                y.rows(),
                y.chunk_rows()
            ),
        ));
    }
    budget.check(x.cols().max(y.cols()))?;
    let mut acc = Mat::zeros(x.cols(), y.cols());
    for i in 0..x.n_chunks() {
        xty_accumulate(&mut acc, &x.read_chunk(i)?, &y.read_chunk(i)?)?;
    }
    Ok(acc)
}

/// `out = a · b`, chunk by chunk, with up to `workers` threads pulling chunks.
///
/// Every output chunk depends only on the matching input chunk, so the file
/// contents do not depend on `workers`. On failure the lowest failing chunk
/// index is reported.
pub fn ooc_matmul(a: &BigArray, b: &Mat, out: &BigArray, workers: usize) -> Result<()> {
    if a.cols() != b.rows() || out.rows() != a.rows() || out.cols() != b.cols() {
        return Err(Error::shape(
            "ooc_matmul",
            format!(
                "a {}x{}, b {:?}, out {}x{}",
                a.rows(),
                a.cols(),
                b.shape(),
                out.rows(),
                out.cols()
            ),
        ));
    }
    if out.chunk_rows() != a.chunk_rows() {
        return Err(Error::shape(
            "ooc_matmul",
            format!("chunk_rows {} (a) vs {} (out)", a.chunk_rows(), out.chunk_rows()),
        ));
    }
    if out.mode() != Mode::Write {
        return Err(Error::State(format!("{} is open read-only", out.path().display())));
    }
    let n_chunks = a.n_chunks();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<(usize, Error)>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n_chunks.max(1)) {
            s.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_chunks {
                    break;
                }
                let res = a
                    .read_chunk(i)
                    .and_then(|chunk| matmul(&chunk, b))
                    .and_then(|prod| out.write_chunk(i, &prod));
                if let Err(e) = res {
                    stop.store(true, Ordering::Relaxed);
                    let mut slot = failure.lock().expect("failure slot poisoned");
                    if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                        *slot = Some((i, e));
                    }
                }
            });
        }
    });
    match failure.into_inner().expect("failure slot poisoned") {
        Some((index, source)) => Err(Error::Chunk {
            index,
            source: Box::new(source),
        }),
        None => Ok(()),
    }
}

/// Primal training from on-disk inputs: `(XᵀX + nλI)W = XᵀY`.
pub fn train_primal_ooc(x: &BigArray, y: &BigArray, lambda: f64, budget: MemoryBudget) -> Result<RlsModel> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Parameter(format!("lambda must be finite and > 0, got {lambda}")));
    }
    let g = ooc_gram(x, budget)?;
    let r = ooc_xty(x, y, budget)?;
    let weights = shifted_solve(&g, &r, x.rows() as f64 * lambda)?;
    Ok(RlsModel {
        solution: Solution::Primal {
            weights,
            features: None,
        },
        lambda,
        output_lambdas: None,
    })
}
