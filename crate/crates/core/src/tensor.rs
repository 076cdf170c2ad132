//! Dense row-major tensors (height, then width, then channels).

use std::fmt::{Debug, Display};
use std::io::{Read, Write};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Maximum supported tensor rank.
pub const MAX_RANK: usize = 4;

/// Floating point element type: `f32` for training and inference, `f64`
/// for gradient verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn erf(self) -> Self;

    /// `c = a·b` (or `c += a·b` when `accumulate`), all operands described by
    /// row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
        accumulate: bool,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_gemm_extent(rows: usize, cols: usize, strides: (isize, isize), len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path, $erf:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                c_strides: (isize, isize),
                accumulate: bool,
            ) {
                check_gemm_extent(m, k, a_strides, a.len());
                check_gemm_extent(k, n, b_strides, b.len());
                check_gemm_extent(m, n, c_strides, c.len());
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every operand extent was checked against its slice length.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm, libm::erff);
impl_real!(f64, "f64", matrixmultiply::dgemm, libm::erf);

/// How to fill a new tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Init<T> {
    Zeros,
    Constant(T),
    /// Uniform in `[lo, hi)`, reproducible from `seed`.
    Uniform { lo: T, hi: T, seed: u64 },
    Data(Vec<T>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_RANK {
        return Err(Error::shape(op, format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(op, format!("extents must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], init: Init<T>) -> Result<Self> {
        let numel = check_shape("tensor_new", shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Constant(c) => vec![c; numel],
            Init::Uniform { lo, hi, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (lo, hi) = (lo.f64(), hi.f64());
                (0..numel)
                    .map(|_| T::of(lo + (hi - lo) * rng.gen::<f64>()))
                    .collect()
            }
            Init::Data(data) => {
                if data.len() != numel {
                    return Err(Error::shape(
                        "tensor_new",
                        format!("shape {shape:?} needs {numel} values, got {}", data.len()),
                    ));
                }
                data
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, Init::Zeros).expect("valid shape")
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(shape, Init::Data(data))
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Cast every element to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape("reshape", shape)?;
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Sequential-order sum.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

impl<T> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last (channel) axis; 1 for scalars.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn hwc(&self) -> Option<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Some((h, w, c)),
            _ => None,
        }
    }
}

const FIXTURE_MAGIC: &str = "TNSR";

/// Write the raw fixture format: an ASCII header line
/// `TNSR v1 <rank> <d0> .. <dn>` followed by little-endian f32 values.
pub fn write_fixture<T: Real>(t: &Tensor<T>, mut w: impl Write) -> std::io::Result<()> {
    let mut header = format!("{FIXTURE_MAGIC} v1 {}", t.rank());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    for v in t.data() {
        w.write_all(&(v.f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_fixture(mut r: impl Read) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Fixture(format!("read failed: {e}")))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Fixture("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Fixture("header is not ASCII".into()))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some(FIXTURE_MAGIC) || fields.next() != Some("v1") {
        return Err(Error::Fixture(format!("bad magic in `{header}`")));
    }
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Fixture(format!("bad header `{header}`")))
    };
    let rank = parse(fields.next())?;
    let shape = (0..rank).map(|_| parse(fields.next())).collect::<Result<Vec<_>>>()?;
    if fields.next().is_some() {
        return Err(Error::Fixture(format!("trailing header fields in `{header}`")));
    }
    let payload = &bytes[nl + 1..];
    let numel: usize = shape.iter().product();
    if payload.len() != numel * 4 {
        return Err(Error::Fixture(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data)
}
