//! Dense row-major f64 tensors and the raw kernels the tape is built on.
//!
//! Storage is always 64-bit; reductions accumulate in f64 so gradient
//! checks see full precision.

use crate::error::{Error, Result};
use rand::Rng;
use rayon::prelude::*;

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Gaussian init with the given std, deterministic for a fixed rng state.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        // Box-Muller on the rng's uniform stream keeps the byte stream
        // identical across platforms.
        let mut i = 0;
        while i < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            i += 1;
            if i < n {
                data.push(r * theta.sin() * std);
                i += 1;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows when viewed as a 2-D matrix (last axis = columns).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot view {} elements as {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n].
///
/// i-k-j loop order with row accumulation; the inner loop vectorizes and
/// every output element is produced by a single serial accumulation, so
/// results are bitwise reproducible regardless of thread count.
pub fn matmul(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let work = |(i, row): (usize, &mut [f64])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= 32_768 {
        out.par_chunks_mut(n).enumerate().for_each(work);
    } else {
        out.chunks_mut(n).enumerate().for_each(work);
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T  (rows of both operands are contiguous).
pub fn matmul_nt(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let work = |(i, row): (usize, &mut [f64])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= 32_768 {
        out.par_chunks_mut(n).enumerate().for_each(work);
    } else {
        out.chunks_mut(n).enumerate().for_each(work);
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_tn(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    let ad = a.data();
    let bd = b.data();
    let work = |(p, row): (usize, &mut [f64])| {
        for i in 0..m {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= 32_768 {
        out.par_chunks_mut(n).enumerate().for_each(work);
    } else {
        out.chunks_mut(n).enumerate().for_each(work);
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}
