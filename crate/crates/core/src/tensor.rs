//! Dense row-major tensors.
//!
//! Values are carried as `f64` regardless of dtype. An `F32` tensor holds only
//! values that are exactly representable in `f32`: every constructor rounds
//! through `f32`, so kernels accumulate in `f64` and round once when they build
//! their output.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// `F32` wins when the two differ.
    pub fn common(self, other: DType) -> DType {
        if self == DType::F32 || other == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Input(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(extents: impl Into<Vec<usize>>) -> Result<Shape> {
        let extents = extents.into();
        if extents.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank {} exceeds the maximum of {MAX_RANK}",
                extents.len()
            )));
        }
        Ok(Shape(extents))
    }

    pub fn scalar() -> Shape {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for axis in (0..self.0.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.0[axis + 1];
        }
        strides
    }

    /// Right-aligned broadcast of two shapes, as used by binary elementwise ops.
    pub fn broadcast_with(&self, other: &Shape) -> Option<Shape> {
        let rank = self.rank().max(other.rank());
        let mut out = vec![0; rank];
        for (k, slot) in out.iter_mut().enumerate() {
            let a = extent_from_right(self, rank - 1 - k);
            let b = extent_from_right(other, rank - 1 - k);
            *slot = match (a, b) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            };
        }
        Some(Shape(out))
    }
}

fn extent_from_right(shape: &Shape, from_right: usize) -> usize {
    let r = shape.rank();
    if from_right < r {
        shape.0[r - 1 - from_right]
    } else {
        1
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        assert!(dims.len() <= MAX_RANK, "rank exceeds {MAX_RANK}");
        Shape(dims.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(dims: [usize; N]) -> Self {
        Shape::from(&dims[..])
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(dtype: DType, shape: impl Into<Shape>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of length {} does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor::from_parts(dtype, shape, data))
    }

    /// Builds a tensor whose buffer length is already known to match.
    pub(crate) fn from_parts(dtype: DType, shape: Shape, mut data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        if dtype == DType::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Tensor { dtype, shape, data }
    }

    pub fn from_f64(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(DType::F64, shape, data)
    }

    pub fn scalar(dtype: DType, value: f64) -> Tensor {
        Tensor::from_parts(dtype, Shape::scalar(), vec![value])
    }

    pub fn full(dtype: DType, shape: impl Into<Shape>, value: f64) -> Tensor {
        let shape = shape.into();
        let n = shape.numel();
        Tensor::from_parts(dtype, shape, vec![value; n])
    }

    pub fn zeros(dtype: DType, shape: impl Into<Shape>) -> Tensor {
        Tensor::full(dtype, shape, 0.0)
    }

    pub fn ones(dtype: DType, shape: impl Into<Shape>) -> Tensor {
        Tensor::full(dtype, shape, 1.0)
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.dtype, self.shape.clone())
    }

    pub fn ones_like(&self) -> Tensor {
        Tensor::ones(self.dtype, self.shape.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn size_in_bytes(&self) -> usize {
        self.numel() * self.dtype.size_in_bytes()
    }

    /// New tensor with this tensor's dtype and shape.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(self.dtype, self.shape.clone(), data)
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        Tensor::from_parts(dtype, self.shape.clone(), self.data.clone())
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor {
            dtype: self.dtype,
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.dtype,
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max|a - b| / max(max|a|, max|b|)`, zero when both tensors are zero.
    pub fn rel_diff(&self, other: &Tensor) -> Result<f64> {
        let diff = self.max_abs_diff(other)?;
        let scale = self.max_abs().max(other.max_abs());
        Ok(if scale == 0.0 { diff } else { diff / scale })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Add, self, Some(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Sub, self, Some(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Mul, self, Some(other))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Div, self, Some(other))
    }

    pub fn rsqrt(&self) -> Result<Tensor> {
        elementwise(ElementwiseOp::Rsqrt, self, None)
    }
}

/// For each axis of `target`, the stride into `src` (0 on broadcast axes).
fn broadcast_strides(src: &Shape, target: &Shape) -> Option<Vec<usize>> {
    if src.rank() > target.rank() {
        return None;
    }
    let offset = target.rank() - src.rank();
    let src_strides = src.strides();
    let mut strides = vec![0; target.rank()];
    for (axis, &extent) in src.dims().iter().enumerate() {
        let t = target.dims()[axis + offset];
        if extent == t {
            strides[axis + offset] = src_strides[axis];
        } else if extent != 1 {
            return None;
        }
    }
    Some(strides)
}

/// Visits every multi-index of `shape` in row-major order, passing the offset
/// into a tensor laid out with `strides`.
fn for_each_offset(shape: &Shape, strides: &[usize], mut f: impl FnMut(usize)) {
    let n = shape.numel();
    if n == 0 {
        return;
    }
    let dims = shape.dims();
    let mut index = vec![0usize; dims.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        f(offset);
        for axis in (0..dims.len()).rev() {
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < dims[axis] {
                break;
            }
            offset -= strides[axis] * dims[axis];
            index[axis] = 0;
        }
    }
}

/// Replicates `t` along right-aligned size-1 (or missing) axes to `target`.
pub fn broadcast_to(t: &Tensor, target: &Shape) -> Result<Tensor> {
    let strides = broadcast_strides(t.shape(), target).ok_or_else(|| Error::ShapeMismatch {
        op: "broadcast_to",
        left: t.shape().clone(),
        right: target.clone(),
    })?;
    let mut data = Vec::with_capacity(target.numel());
    for_each_offset(target, &strides, |off| data.push(t.data[off]));
    Ok(Tensor::from_parts(t.dtype, target.clone(), data))
}

/// Adjoint of [`broadcast_to`]: sums `t` over every axis that a broadcast from
/// `target` would have replicated.
pub fn reduce_to(t: &Tensor, target: &Shape) -> Result<Tensor> {
    let strides = broadcast_strides(target, t.shape()).ok_or_else(|| Error::ShapeMismatch {
        op: "reduce_to",
        left: t.shape().clone(),
        right: target.clone(),
    })?;
    if t.shape() == target {
        return Ok(t.clone());
    }
    let mut acc = vec![0.0; target.numel()];
    let mut src = t.data.iter();
    for_each_offset(t.shape(), &strides, |off| {
        acc[off] += src.next().copied().unwrap_or(0.0);
    });
    Ok(Tensor::from_parts(t.dtype, target.clone(), acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Rsqrt,
}

/// Elementwise arithmetic with implicit right-aligned broadcasting.
///
/// `Rsqrt` is unary and ignores `b`; the binary ops require it. Division by an
/// exact zero and `rsqrt(x)` for `x <= 0` are rejected instead of producing
/// inf/nan.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if op == ElementwiseOp::Rsqrt {
        let mut out = Vec::with_capacity(a.numel());
        for &x in &a.data {
            if x <= 0.0 || x.is_nan() {
                return Err(Error::Domain(format!("rsqrt of non-positive value {x}")));
            }
            out.push(1.0 / x.sqrt());
        }
        return Ok(Tensor::from_parts(a.dtype, a.shape.clone(), out));
    }
    let b = b.ok_or_else(|| Error::Input(format!("{op:?} needs two operands")))?;
    let shape = a
        .shape
        .broadcast_with(&b.shape)
        .ok_or_else(|| Error::ShapeMismatch {
            op: "elementwise",
            left: a.shape.clone(),
            right: b.shape.clone(),
        })?;
    let sa = broadcast_strides(&a.shape, &shape).expect("broadcast shape is compatible");
    let sb = broadcast_strides(&b.shape, &shape).expect("broadcast shape is compatible");
    let mut lhs = Vec::with_capacity(shape.numel());
    for_each_offset(&shape, &sa, |off| lhs.push(a.data[off]));
    let mut out = Vec::with_capacity(shape.numel());
    let mut i = 0;
    let mut err = None;
    for_each_offset(&shape, &sb, |off| {
        let (x, y) = (lhs[i], b.data[off]);
        i += 1;
        out.push(match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::Div => {
                if y == 0.0 && err.is_none() {
                    err = Some(Error::Domain(format!("division of {x} by zero")));
                }
                x / y
            }
            ElementwiseOp::Rsqrt => unreachable!(),
        });
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(Tensor::from_parts(a.dtype.common(b.dtype), shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_f64(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_row_vector() {
        let out = broadcast_to(&t(&[2], &[5.0, 7.0]), &Shape::from([3, 2])).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0, 5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn broadcast_zero_scalar() {
        let out = broadcast_to(&t(&[1], &[0.0]), &Shape::from([4])).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn broadcast_column_matches_nested_loops() {
        let src = t(&[2, 1], &[1.0, 2.0]);
        let out = broadcast_to(&src, &Shape::from([2, 3])).unwrap();
        let mut expected = Vec::new();
        for i in 0..2 {
            for _ in 0..3 {
                expected.push(src.data()[i]);
            }
        }
        assert_eq!(out.data(), &expected[..]);
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_incompatible_names_both_shapes() {
        let err = broadcast_to(&t(&[3], &[1.0, 2.0, 3.0]), &Shape::from([2, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn reduce_matches_loop_sum() {
        let src = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = reduce_to(&src, &Shape::from([2])).unwrap();
        let mut expected = [0.0; 2];
        for row in 0..3 {
            for col in 0..2 {
                expected[col] += src.data()[row * 2 + col];
            }
        }
        assert_eq!(out.data(), &expected);
        assert_eq!(out.data(), &[9.0, 12.0]);
    }

    #[test]
    fn reduce_zeros_and_identity() {
        let out = reduce_to(&Tensor::zeros(DType::F64, [4]), &Shape::from([1])).unwrap();
        assert_eq!(out.data(), &[0.0]);
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reduce_to(&x, x.shape()).unwrap(), x);
    }

    #[test]
    fn reduce_rejects_incompatible() {
        let x = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(
            reduce_to(&x, &Shape::from([2])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let r = t(&[1], &[4.0]).rsqrt().unwrap();
        assert_eq!(r.data(), &[0.5]);
        let s = t(&[2], &[1.0, 2.0]).add(&t(&[1], &[10.0])).unwrap();
        assert_eq!(s.data(), &[11.0, 12.0]);
        let x = t(&[2, 2], &[1.5, -2.0, 3.25, 0.0]);
        assert_eq!(x.mul(&x.ones_like()).unwrap(), x);
    }

    #[test]
    fn elementwise_domain_errors() {
        let zero = t(&[1], &[0.0]);
        assert!(matches!(t(&[1], &[1.0]).div(&zero), Err(Error::Domain(_))));
        assert!(matches!(zero.rsqrt(), Err(Error::Domain(_))));
        assert!(matches!(t(&[1], &[-1.0]).rsqrt(), Err(Error::Domain(_))));
    }

    #[test]
    fn f32_tensors_hold_rounded_values() {
        let x = Tensor::new(DType::F32, [1], vec![0.1]).unwrap();
        assert_eq!(x.data()[0], 0.1f32 as f64);
        let y = x.add(&Tensor::from_f64([1], vec![0.2]).unwrap()).unwrap();
        assert_eq!(y.dtype(), DType::F32);
        assert_eq!(y.data()[0], (0.1f32 as f64 + 0.2) as f32 as f64);
    }

    #[test]
    fn rank_limit() {
        assert!(Shape::new(vec![1; 9]).is_err());
        assert!(Shape::new(vec![1; 8]).is_ok());
        assert_eq!(Shape::scalar().numel(), 1);
    }
}
