//! Dense real arrays.
//!
//! [`Matrix`] is the 2-D workhorse of the rate loss, [`FeatureTensor`] is the
//! H×W×C bottleneck activation being compressed, and [`Tensor`] is the
//! shape-generic payload carried by autodiff nodes.
//!
//! All storage is `f64`, row-major. Feature tensors are channel-major so that a
//! channel is a contiguous H×W slice.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        // i-k-j order keeps the inner loop contiguous in both `other` and `out`.
        for i in 0..n {
            let out_row = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: n, cols: p, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Entrywise absolute sum.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// An H×W×C activation tensor stored channel-major: `data[(c * H + y) * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "feature tensor dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "dims must be positive");
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_channels(channels: &[Matrix]) -> Result<Self> {
        let first = channels.first().ok_or_else(|| Error::shape("no channels given"))?;
        let (h, w) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(h * w * channels.len());
        for (i, m) in channels.iter().enumerate() {
            if m.rows() != h || m.cols() != w {
                return Err(Error::shape(format!(
                    "channel {i} is {}x{}, expected {h}x{w}",
                    m.rows(),
                    m.cols()
                )));
            }
            data.extend_from_slice(m.data());
        }
        Self::new(h, w, channels.len(), data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn check_channel(&self, i: usize) -> Result<()> {
        if i >= self.channels {
            return Err(Error::shape(format!("channel {i} out of range (C = {})", self.channels)));
        }
        Ok(())
    }

    pub fn channel_slice(&self, i: usize) -> Result<&[f64]> {
        self.check_channel(i)?;
        let n = self.height * self.width;
        Ok(&self.data[i * n..(i + 1) * n])
    }

    pub fn channel(&self, i: usize) -> Result<Matrix> {
        let slice = self.channel_slice(i)?;
        Ok(Matrix { rows: self.height, cols: self.width, data: slice.to_vec() })
    }

    pub fn set_channel(&mut self, i: usize, m: &Matrix) -> Result<()> {
        self.check_channel(i)?;
        if m.rows() != self.height || m.cols() != self.width {
            return Err(Error::shape(format!(
                "channel is {}x{}, tensor plane is {}x{}",
                m.rows(),
                m.cols(),
                self.height,
                self.width
            )));
        }
        let n = self.height * self.width;
        self.data[i * n..(i + 1) * n].copy_from_slice(m.data());
        Ok(())
    }

    pub fn scale(&self, s: f64) -> FeatureTensor {
        FeatureTensor { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Views the tensor as a `[C, H, W]` shaped [`Tensor`].
    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.channels, self.height, self.width], data: self.data.clone() }
    }

    /// Inverse of [`FeatureTensor::to_tensor`]; the tensor must be 3-D `[C, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, h, w] => Self::new(h, w, c, t.data().to_vec()),
            s => Err(Error::shape(format!("expected [C, H, W] tensor, got {s:?}"))),
        }
    }

    /// Writes the tensor in the FTEN format: `"FTEN"`, version byte 1, H, W, C
    /// as little-endian u32, then H·W·C little-endian f32 in channel-major order.
    pub fn write_ften<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FTEN_MAGIC)?;
        w.write_all(&[FTEN_VERSION])?;
        for dim in [self.height, self.width, self.channels] {
            let dim = u32::try_from(dim).map_err(|_| Error::data("dimension exceeds u32"))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one FTEN blob from `r`, leaving any trailing bytes unread.
    pub fn read_ften<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 17];
        read_exact_or_decode(&mut r, &mut head, "FTEN header")?;
        if &head[..4] != FTEN_MAGIC {
            return Err(Error::decode("bad FTEN magic"));
        }
        if head[4] != FTEN_VERSION {
            return Err(Error::decode(format!("unsupported FTEN version {}", head[4])));
        }
        let dim = |k: usize| u32::from_le_bytes(head[5 + 4 * k..9 + 4 * k].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::decode(format!("FTEN dims must be positive, got {h}x{w}x{c}")));
        }
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .filter(|&n| n <= (1 << 31))
            .ok_or_else(|| Error::decode("FTEN dims overflow"))?;
        let mut raw = vec![0u8; n * 4];
        read_exact_or_decode(&mut r, &mut raw, "FTEN payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::new(h, w, c, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ften(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let t = Self::read_ften(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::decode("trailing bytes after FTEN payload"));
        }
        Ok(t)
    }
}

const FTEN_MAGIC: &[u8; 4] = b"FTEN";
const FTEN_VERSION: u8 = 1;

pub(crate) fn read_exact_or_decode<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::decode(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Shape-generic dense array used as the autodiff payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// True for a single-element tensor of any rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn as_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [r, c] => Matrix::new(r, c, self.data.clone()),
            _ => Err(Error::shape(format!("expected 2-D tensor, got {:?}", self.shape))),
        }
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        Tensor { shape: vec![m.rows, m.cols], data: m.data }
    }
}
