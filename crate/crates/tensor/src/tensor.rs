use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::real::Real;

/// Dense row-major n-dimensional array. Four-dimensional feature maps use
/// the NCHW convention.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::shape(
                "dims4",
                "rank-4 NCHW tensor",
                format!("{:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial window `[top, top+h) x [left, left+w)` of an NCHW tensor.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let (n, c, src_h, src_w) = self.dims4()?;
        if top + h > src_h || left + w > src_w {
            return Err(TensorError::invalid(
                "crop",
                format!("window {h}x{w} at ({top},{left}) exceeds {src_h}x{src_w}"),
            ));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(src_h * src_w) {
            for y in top..top + h {
                out.extend_from_slice(&plane[y * src_w + left..y * src_w + left + w]);
            }
        }
        Tensor::new(vec![n, c, h, w], out)
    }

    /// Samples `[start, start+len)` along the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let n = *self.shape.first().unwrap_or(&0);
        if start + len > n {
            return Err(TensorError::invalid(
                "narrow_batch",
                format!("range {start}..{} exceeds batch {n}", start + len),
            ));
        }
        let per = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Samples at `indices` along the leading axis, in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = *self.shape.first().unwrap_or(&0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::invalid("select_batch", format!("index {bad} exceeds batch {n}")));
        }
        let per = self.data.len() / n.max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Concatenates along the leading axis; trailing shapes must agree.
    pub fn stack_batch(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("stack_batch", "no tensors"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::shape(
                    "stack_batch",
                    format!("{tail:?}"),
                    format!("{:?}", &p.shape[1..]),
                ));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(shape, data)
    }

    /// Bilinear resampling of the two trailing axes (align-corners-false),
    /// outside any graph.
    pub fn resize_bilinear(&self, (th, tw): (usize, usize)) -> Result<Self> {
        if self.rank() < 2 || th == 0 || tw == 0 {
            return Err(TensorError::invalid("resize_bilinear", "needs rank >= 2 and extents >= 1"));
        }
        let (h, w) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let planes = self.numel() / (h * w).max(1);
        let rows = kernels::bilinear_taps(h, th);
        let cols = kernels::bilinear_taps(w, tw);
        let data = kernels::bilinear_forward(planes, &self.data, (h, w), &rows, &cols);
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = th;
        shape[r - 1] = tw;
        Tensor::new(shape, data)
    }

    /// Counter-clockwise rotation of the two trailing axes by
    /// `quarter_turns * 90` degrees, outside any graph.
    pub fn rot90(&self, quarter_turns: usize) -> Result<Self> {
        if self.rank() < 2 {
            return Err(TensorError::invalid("rot90", "needs rank >= 2"));
        }
        let r = self.rank();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let k = quarter_turns % 4;
        let idx = kernels::rot90_source_indices(h, w, k);
        let mut data = Vec::with_capacity(self.numel());
        for plane in self.data.chunks(h * w) {
            data.extend(idx.iter().map(|&i| plane[i]));
        }
        let mut shape = self.shape.clone();
        if k % 2 == 1 {
            shape.swap(r - 2, r - 1);
        }
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(TensorError::shape(
                "max_abs_diff",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
