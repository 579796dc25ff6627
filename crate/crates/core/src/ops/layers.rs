//! Small layers for the classification head of the toy networks.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `mask` is any tensor that is positive exactly where the forward input was
/// positive (the input itself or the forward output).
pub fn relu_backward(dy: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if dy.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: dy.shape().clone(),
            right: mask.shape().clone(),
        });
    }
    let data = dy
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| if m > 0.0 { g } else { 0.0 })
        .collect();
    dy.with_data(data)
}

/// `[N, C, H, W] -> [N, C]`
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "global_avg_pool expects rank 4, got {}",
            x.shape()
        )));
    }
    let d = x.dims();
    let plane = d[2] * d[3];
    if plane == 0 {
        return Err(Error::shape("global_avg_pool over an empty plane"));
    }
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(x.dtype(), Shape::from([d[0], d[1]]), data))
}

pub fn global_avg_pool_backward(dy: &Tensor, input_shape: &Shape) -> Result<Tensor> {
    let d = input_shape.dims();
    if d.len() != 4 || dy.dims() != [d[0], d[1]] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: dy.shape().clone(),
            right: input_shape.clone(),
        });
    }
    let plane = d[2] * d[3];
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in dy.data() {
        let v = g / plane as f64;
        data.extend(std::iter::repeat_n(v, plane));
    }
    Ok(Tensor::from_parts(dy.dtype(), input_shape.clone(), data))
}

/// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, k, m) = linear_dims(x, weight, bias)?;
    let (xs, ws) = (x.data(), weight.data());
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let xrow = &xs[r * k..][..k];
        for o in 0..m {
            let wrow = &ws[o * k..][..k];
            let mut acc: f64 = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            if let Some(b) = bias {
                acc += b.data()[o];
            }
            out[r * m + o] = acc;
        }
    }
    Ok(Tensor::from_parts(
        x.dtype().common(weight.dtype()),
        Shape::from([n, m]),
        out,
    ))
}

fn linear_dims(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || weight.rank() != 2 || x.dims()[1] != weight.dims()[1] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape().clone(),
            right: weight.shape().clone(),
        });
    }
    let m = weight.dims()[0];
    if let Some(b) = bias {
        if b.dims() != [m] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: b.shape().clone(),
                right: Shape::from([m]),
            });
        }
    }
    Ok((x.dims()[0], x.dims()[1], m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<LinearGrads> {
    let (n, k, m) = linear_dims(x, weight, None)?;
    if dy.dims() != [n, m] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            left: dy.shape().clone(),
            right: Shape::from([n, m]),
        });
    }
    let (xs, ws, gs) = (x.data(), weight.data(), dy.data());
    let mut dx = vec![0.0; n * k];
    let mut dw = vec![0.0; m * k];
    let mut db = vec![0.0; m];
    for r in 0..n {
        for o in 0..m {
            let g = gs[r * m + o];
            db[o] += g;
            for c in 0..k {
                dx[r * k + c] += g * ws[o * k + c];
                dw[o * k + c] += g * xs[r * k + c];
            }
        }
    }
    let dtype = x.dtype().common(weight.dtype()).common(dy.dtype());
    Ok(LinearGrads {
        dx: Tensor::from_parts(dtype, x.shape().clone(), dx),
        dweight: Tensor::from_parts(dtype, weight.shape().clone(), dw),
        dbias: Tensor::from_parts(dtype, Shape::from([m]), db),
    })
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dims()[0] != labels.len() {
        return Err(Error::Input(format!(
            "logits {} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.dims()[0], logits.dims()[1]);
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Input(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[r * k..][..k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += denom.ln() + max - row[label];
        for c in 0..k {
            let p = (row[c] - max).exp() / denom;
            grad[r * k + c] = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((
        logits.dtype().round(loss / n as f64),
        Tensor::from_parts(logits.dtype(), logits.shape().clone(), grad),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn relu_definition() {
        let x = Tensor::from_f64([2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        let g = relu_backward(&Tensor::ones(DType::F64, [2]), &x).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn xent_uniform_logits() {
        let logits = Tensor::zeros(DType::F64, [1, 2]);
        let (loss, grad) = softmax_xent(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn xent_label_out_of_range() {
        let logits = Tensor::zeros(DType::F64, [1, 2]);
        assert!(matches!(softmax_xent(&logits, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn pool_constant_map() {
        let x = Tensor::full(DType::F64, [2, 3, 4, 5], 1.75);
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3]);
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn linear_small() {
        let x = Tensor::from_f64([1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_f64([2, 2], vec![1.0, 0.0, 0.5, -1.0]).unwrap();
        let b = Tensor::from_f64([2], vec![0.1, 0.2]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.1, 0.5 - 2.0 + 0.2]);
    }
}
