use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use ndarray::{ArrayD, IxDyn};
use ndarray_npy::{ReadNpyError, ReadNpyExt, WriteNpyExt};

use crate::error::{shape_err, Error, Result};
use crate::map::PixelMap;

/// Dense row-major array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// The shape as a fixed-rank array.
    pub fn dims<const N: usize>(&self) -> Result<[usize; N]> {
        self.shape
            .as_slice()
            .try_into()
            .map_err(|_| shape_err(format!("expected a rank-{N} tensor, got shape {:?}", self.shape)))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let [r, c] = self.dims()?;
        Ok(DMatrix::from_row_slice(r, c, &self.data))
    }

    /// `height × width × channels`.
    pub fn from_map(m: &PixelMap) -> Self {
        Self {
            shape: vec![m.height, m.width, m.channels],
            data: m.data.clone(),
        }
    }

    /// Accepts `H × W × C` or `H × W` (one channel).
    pub fn to_map(&self) -> Result<PixelMap> {
        match self.shape.as_slice() {
            &[h, w, c] => PixelMap::from_vec(h, w, c, self.data.clone()),
            &[h, w] => PixelMap::from_vec(h, w, 1, self.data.clone()),
            s => Err(shape_err(format!("expected an HxW or HxWxC tensor, got shape {s:?}"))),
        }
    }

    fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone()).expect("shape checked on construction")
    }
}

/// Reads a `.npy` array of `f64` or `f32` values.
pub fn read_npy(path: &Path) -> Result<Tensor> {
    let open = || File::open(path).map(BufReader::new);
    let fmt = |e: ReadNpyError| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let arr: ArrayD<f64> = match ArrayD::<f64>::read_npy(open()?) {
        Ok(a) => a,
        Err(ReadNpyError::WrongDescriptor(_)) => ArrayD::<f32>::read_npy(open()?).map_err(fmt)?.mapv(f64::from),
        Err(e) => return Err(fmt(e)),
    };
    let shape = arr.shape().to_vec();
    Ok(Tensor {
        shape,
        data: arr.as_standard_layout().iter().copied().collect(),
    })
}

pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    t.to_array().write_npy(w).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

const ARCHIVE_MAGIC: &[u8; 4] = b"SSTA";
const ARCHIVE_VERSION: u32 = 1;

/// Named tensors plus JSON metadata, stored losslessly as little-endian
/// `f64`.
///
/// Layout: magic `SSTA`, version (u32), metadata length (u64) and UTF-8
/// JSON, tensor count (u32), then per tensor: name length (u32), name,
/// rank (u32), dims (u64 each), values (f64). Tensors are written in name
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("tensor archive has no entry '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in &t.data {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r).map_err(|e| match e {
            Error::Io(io) => Error::Format {
                path: path.to_path_buf(),
                reason: io.to_string(),
            },
            Error::Invalid(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Invalid("not a tensor archive (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Invalid(format!("unsupported tensor archive version {version}")));
        }
        let meta_len = r.read_u64::<LittleEndian>()? as usize;
        let meta_bytes = read_bytes(r, meta_len)?;
        let meta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Invalid(format!("metadata: {e}")))?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let name = String::from_utf8(read_bytes(r, len)?)
                .map_err(|_| Error::Invalid("tensor name is not UTF-8".into()))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Invalid(format!("tensor '{name}' is too large")))?;
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            tensors.insert(name, Tensor { shape, data });
        }
        Ok(Self { meta, tensors })
    }
}

fn read_bytes<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Invalid("truncated tensor archive".into()));
    }
    Ok(buf)
}
