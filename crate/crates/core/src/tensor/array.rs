use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max))
    }

    /// Slice `[start, start+len)` along axis 1 of a rank-4 tensor.
    pub fn channels(&self, start: usize, len: usize) -> Result<Self> {
        let (b, c, h, w) = dims4(self.shape(), "channels")?;
        if start + len > c {
            return Err(Error::shape(
                "channels",
                format!("range {start}..{} exceeds {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let off = (bi * c + start) * plane;
            data.extend_from_slice(&self.data[off..off + len * plane]);
        }
        Ok(Self {
            shape: vec![b, len, h, w],
            data,
        })
    }
}

pub(crate) fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected rank-4 tensor, got {shape:?}"),
        )),
    }
}

/// Rearranges `[B, C, H, W]` into `[B, C*p*p, H/p, W/p]`.
///
/// Output channel `c*p*p + dy*p + dx` holds input channel `c` at offset
/// `(dy, dx)` inside each `p x p` block, so each input channel maps onto a
/// contiguous channel range.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x.shape(), "space_to_depth")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "space_to_depth",
            format!("patch {p} does not tile {h}x{w}"),
        ));
    }
    if p == 1 {
        return Ok(x.clone());
    }
    let (oh, ow, oc) = (h / p, w / p, c * p * p);
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let occ = ci * p * p + (r % p) * p + col % p;
                    let dst = ((bi * oc + occ) * oh + r / p) * ow + col / p;
                    out[dst] = src[((bi * c + ci) * h + r) * w + col];
                }
            }
        }
    }
    Tensor::new(&[b, oc, oh, ow], out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, oc, oh, ow) = dims4(x.shape(), "depth_to_space")?;
    if p == 0 || oc % (p * p) != 0 {
        return Err(Error::shape(
            "depth_to_space",
            format!("{oc} channels not divisible by patch area {}", p * p),
        ));
    }
    if p == 1 {
        return Ok(x.clone());
    }
    let (c, h, w) = (oc / (p * p), oh * p, ow * p);
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let occ = ci * p * p + (r % p) * p + col % p;
                    let s = ((bi * oc + occ) * oh + r / p) * ow + col / p;
                    out[((bi * c + ci) * h + r) * w + col] = src[s];
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}
