//! Dense row-major `f64` tensors and the repo-wide binary tensor file format.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::instrument;

const MAGIC: &[u8; 4] = b"MUST";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Immutable dense tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return dim_err("tensor", format!("zero-sized dimension in {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        instrument::alloc(data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    pub fn into_data(mut self) -> Vec<f64> {
        let data = std::mem::take(&mut self.data);
        instrument::release(data.len());
        data
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Row `i` of a tensor viewed as `[rows x last_dim]`.
    /// Elementwise combination of two same-shape tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_with on mismatched shapes");
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and payload (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", self.shape.len())));
        }
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[DTYPE_F64, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        if head[0] != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype code {}", head[0])));
        }
        let mut shape = Vec::with_capacity(head[1] as usize);
        let mut dim = [0u8; 8];
        for _ in 0..head[1] {
            r.read_exact(&mut dim)?;
            shape.push(u64::from_le_bytes(dim) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_from(&mut f)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        instrument::release(self.data.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([0, 3], vec![]).is_err());
    }

    #[test]
    fn binary_layout_is_exact() {
        let t = Tensor::new([1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"MUST");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf[8], 0);
        assert_eq!(buf[9], 2);
        assert_eq!(&buf[10..18], &1u64.to_le_bytes());
        assert_eq!(&buf[18..26], &2u64.to_le_bytes());
        assert_eq!(&buf[26..34], &1.0f64.to_le_bytes());
        assert_eq!(&buf[34..42], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 42);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn live_counter_tracks_drop() {
        let before = instrument::snapshot().live_scalars;
        {
            let _a = Tensor::zeros([10, 10]);
            assert_eq!(instrument::snapshot().live_scalars, before + 100);
        }
        assert_eq!(instrument::snapshot().live_scalars, before);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn file_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let t = Tensor::randn(shape, 3.0, &mut rng);
                let mut buf = Vec::new();
                t.write_to(&mut buf).unwrap();
                let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
                prop_assert!(t.bit_eq(&back));
            }
        }
    }
}
