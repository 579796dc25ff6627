//! Per-channel batch normalization over `[N, C, H, W]` feature maps.

use crate::error::{Error, Result};
use crate::tensor::{DType, Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    /// Biased running variance, same divisor as the batch variance.
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BnParams {
    /// Identity-initialised BN: `gamma = 1`, `beta = 0`, running stats `(0, 1)`.
    pub fn identity(dtype: DType, channels: usize) -> BnParams {
        BnParams {
            gamma: Tensor::ones(dtype, [channels]),
            beta: Tensor::zeros(dtype, [channels]),
            running_mean: Tensor::zeros(dtype, [channels]),
            running_var: Tensor::ones(dtype, [channels]),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.numel();
        let want = Shape::from([c]);
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != &want {
                return Err(Error::shape(format!(
                    "bn {name} has shape {}, expected {want}",
                    t.shape()
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Input(format!("bn eps must be positive, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Input(format!(
                "bn momentum must lie in (0, 1), got {}",
                self.momentum
            )));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("running_var has negative entries".into()));
        }
        Ok(())
    }

    /// `1 / sqrt(running_var + eps)` per channel.
    pub fn inv_std(&self) -> Result<Tensor> {
        self.running_var
            .add(&Tensor::scalar(self.running_var.dtype(), self.eps))?
            .rsqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Biased: divides by `N*H*W`.
    pub var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnTrainOutput {
    pub z: Tensor,
    /// `(Y - mean) / sqrt(var + eps)`
    pub x_hat: Tensor,
    pub stats: BatchStats,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads {
    pub dy: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// `(n, c, plane)` of a rank-4 map whose channel count must equal `channels`.
fn layout(y: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if y.rank() != 4 {
        return Err(Error::shape(format!(
            "{op} expects a rank-4 [N, C, H, W] tensor, got {}",
            y.shape()
        )));
    }
    let d = y.dims();
    if d[1] != channels {
        return Err(Error::shape(format!(
            "{op}: input has {} channels, parameters have {channels}",
            d[1]
        )));
    }
    Ok((d[0], d[1], d[2] * d[3]))
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().clone(),
            right: b.shape().clone(),
        });
    }
    Ok(())
}

/// Visits the contiguous `plane` slices of channel `c`.
fn channel_slices(data: &[f64], n: usize, c_total: usize, plane: usize, c: usize) -> impl Iterator<Item = &[f64]> {
    (0..n).map(move |b| &data[(b * c_total + c) * plane..][..plane])
}

pub fn batch_stats(y: &Tensor, channels: usize) -> Result<BatchStats> {
    let (n, c_total, plane) = layout(y, channels, "batch_stats")?;
    let m = n * plane;
    if m == 0 {
        return Err(Error::DegenerateBatch {
            elements: 0,
            required: 1,
        });
    }
    let mut mean = vec![0.0; c_total];
    let mut var = vec![0.0; c_total];
    for c in 0..c_total {
        let s: f64 = channel_slices(y.data(), n, c_total, plane, c)
            .map(|p| p.iter().sum::<f64>())
            .sum();
        let mu = s / m as f64;
        let ss: f64 = channel_slices(y.data(), n, c_total, plane, c)
            .map(|p| p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
            .sum();
        mean[c] = mu;
        var[c] = ss / m as f64;
    }
    let dtype = y.dtype();
    Ok(BatchStats {
        mean: Tensor::from_parts(dtype, Shape::from([c_total]), mean),
        var: Tensor::from_parts(dtype, Shape::from([c_total]), var),
    })
}

/// One EMA step: `running + momentum * (batch - running)`.
pub fn ema_update(running: &Tensor, batch: &Tensor, momentum: f64) -> Result<Tensor> {
    check_same("ema_update", running, batch)?;
    let data = running
        .data()
        .iter()
        .zip(batch.data())
        .map(|(&r, &b)| r + momentum * (b - r))
        .collect();
    running.with_data(data)
}

/// Applies `z = scale[c] * y + shift[c]` channelwise.
fn affine(y: &Tensor, scale: &[f64], shift: &[f64], dtype: DType) -> Tensor {
    let d = y.dims();
    let (c_total, plane) = (d[1], d[2] * d[3]);
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let c = (k / plane) % c_total;
            scale[c] * v + shift[c]
        })
        .collect();
    Tensor::from_parts(dtype, y.shape().clone(), data)
}

pub fn bn_train_forward(y: &Tensor, p: &BnParams) -> Result<BnTrainOutput> {
    let stats = batch_stats(y, p.channels())?;
    let (_, c_total, plane) = layout(y, p.channels(), "bn_train_forward")?;
    let inv: Vec<f64> = stats
        .var
        .data()
        .iter()
        .map(|&v| 1.0 / (v + p.eps).sqrt())
        .collect();
    let mean = stats.mean.data();
    let x_hat: Vec<f64> = y
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let c = (k / plane) % c_total;
            (v - mean[c]) * inv[c]
        })
        .collect();
    let x_hat = Tensor::from_parts(y.dtype(), y.shape().clone(), x_hat);
    let z = affine(&x_hat, p.gamma.data(), p.beta.data(), y.dtype());
    Ok(BnTrainOutput {
        running_mean: ema_update(&p.running_mean, &stats.mean, p.momentum)?,
        running_var: ema_update(&p.running_var, &stats.var, p.momentum)?,
        z,
        x_hat,
        stats,
    })
}

/// `Z = gamma * (Y - mu_hat) / sqrt(var_hat + eps) + beta`, using running statistics only.
pub fn bn_eval_forward(y: &Tensor, p: &BnParams) -> Result<Tensor> {
    layout(y, p.channels(), "bn_eval_forward")?;
    let inv = p.inv_std()?;
    let c = p.channels();
    let (g, b, m, s) = (p.gamma.data(), p.beta.data(), p.running_mean.data(), inv.data());
    let d = y.dims();
    let plane = d[2] * d[3];
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = (k / plane) % c;
            g[ch] * ((v - m[ch]) * s[ch]) + b[ch]
        })
        .collect();
    Ok(Tensor::from_parts(y.dtype(), y.shape().clone(), data))
}

/// Gradients of [`bn_eval_forward`]: `dY = gamma/sqrt(var_hat+eps) * dZ`,
/// `dgamma = sum dZ * (Y - mu_hat)/sqrt(var_hat+eps)`, `dbeta = sum dZ`.
pub fn bn_eval_backward(dz: &Tensor, y: &Tensor, p: &BnParams) -> Result<BnGrads> {
    check_same("bn_eval_backward", dz, y)?;
    let (n, c_total, plane) = layout(y, p.channels(), "bn_eval_backward")?;
    let inv = p.inv_std()?;
    let (g, m, s) = (p.gamma.data(), p.running_mean.data(), inv.data());
    let mut dy = vec![0.0; y.numel()];
    let mut dgamma = vec![0.0; c_total];
    let mut dbeta = vec![0.0; c_total];
    for b in 0..n {
        for c in 0..c_total {
            let off = (b * c_total + c) * plane;
            let scale = g[c] * s[c];
            let (mut sg, mut sb) = (0.0, 0.0);
            for k in off..off + plane {
                let gz = dz.data()[k];
                dy[k] = scale * gz;
                sg += gz * ((y.data()[k] - m[c]) * s[c]);
                sb += gz;
            }
            dgamma[c] += sg;
            dbeta[c] += sb;
        }
    }
    let dtype = dz.dtype().common(y.dtype());
    Ok(BnGrads {
        dy: Tensor::from_parts(dtype, y.shape().clone(), dy),
        dgamma: Tensor::from_parts(dtype, Shape::from([c_total]), dgamma),
        dbeta: Tensor::from_parts(dtype, Shape::from([c_total]), dbeta),
    })
}

/// Gradients of [`bn_train_forward`] with the batch statistics treated as
/// functions of `Y`.
pub fn bn_train_backward(dz: &Tensor, y: &Tensor, stats: &BatchStats, p: &BnParams) -> Result<BnGrads> {
    check_same("bn_train_backward", dz, y)?;
    let (_, c_total, plane) = layout(y, p.channels(), "bn_train_backward")?;
    let mean = stats.mean.data();
    let inv: Vec<f64> = stats
        .var
        .data()
        .iter()
        .map(|&v| 1.0 / (v + p.eps).sqrt())
        .collect();
    let x_hat: Vec<f64> = y
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let c = (k / plane) % c_total;
            (v - mean[c]) * inv[c]
        })
        .collect();
    let x_hat = Tensor::from_parts(y.dtype(), y.shape().clone(), x_hat);
    bn_train_backward_normalized(dz, &x_hat, stats, p)
}

/// Same as [`bn_train_backward`], reusing the saved normalized input.
///
/// `dY = gamma/sqrt(var+eps) * (dZ - mean_ch(dZ) - x_hat * mean_ch(dZ * x_hat))`.
pub fn bn_train_backward_normalized(
    dz: &Tensor,
    x_hat: &Tensor,
    stats: &BatchStats,
    p: &BnParams,
) -> Result<BnGrads> {
    check_same("bn_train_backward", dz, x_hat)?;
    let (n, c_total, plane) = layout(x_hat, p.channels(), "bn_train_backward")?;
    let m = n * plane;
    if m < 2 {
        return Err(Error::DegenerateBatch {
            elements: m,
            required: 2,
        });
    }
    let mut dgamma = vec![0.0; c_total];
    let mut dbeta = vec![0.0; c_total];
    for c in 0..c_total {
        for b in 0..n {
            let off = (b * c_total + c) * plane;
            for k in off..off + plane {
                let gz = dz.data()[k];
                dgamma[c] += gz * x_hat.data()[k];
                dbeta[c] += gz;
            }
        }
    }
    let g = p.gamma.data();
    let mut dy = vec![0.0; x_hat.numel()];
    for c in 0..c_total {
        let scale = g[c] / (stats.var.data()[c] + p.eps).sqrt();
        let mean_dz = dbeta[c] / m as f64;
        let mean_dzx = dgamma[c] / m as f64;
        for b in 0..n {
            let off = (b * c_total + c) * plane;
            for k in off..off + plane {
                dy[k] = scale * (dz.data()[k] - mean_dz - x_hat.data()[k] * mean_dzx);
            }
        }
    }
    let dtype = dz.dtype();
    Ok(BnGrads {
        dy: Tensor::from_parts(dtype, x_hat.shape().clone(), dy),
        dgamma: Tensor::from_parts(dtype, Shape::from([c_total]), dgamma),
        dbeta: Tensor::from_parts(dtype, Shape::from([c_total]), dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn scalar_params(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> BnParams {
        BnParams {
            gamma: Tensor::from_f64([1], vec![gamma]).unwrap(),
            beta: Tensor::from_f64([1], vec![beta]).unwrap(),
            running_mean: Tensor::from_f64([1], vec![mean]).unwrap(),
            running_var: Tensor::from_f64([1], vec![var]).unwrap(),
            eps,
            momentum: 0.1,
        }
    }

    #[test]
    fn ema_matches_scalar_formula() {
        let out = ema_update(
            &Tensor::from_f64([1], vec![0.0]).unwrap(),
            &Tensor::from_f64([1], vec![1.0]).unwrap(),
            0.1,
        )
        .unwrap();
        assert_eq!(out.data(), &[0.0 + 0.1 * (1.0 - 0.0)]);
        assert_eq!(out.data(), &[0.1]);
    }

    #[test]
    fn eval_forward_scalar() {
        // sigma^2 + eps = 4 split as 4 - 1e-5 and 1e-5
        let p = scalar_params(3.0, 1.0, 1.0, 4.0 - 1e-5, 1e-5);
        let y = Tensor::from_f64([1, 1, 1, 1], vec![2.0]).unwrap();
        let z = bn_eval_forward(&y, &p).unwrap();
        let expected = 3.0 * (2.0 - 1.0) / ((4.0 - 1e-5) + 1e-5f64).sqrt() + 1.0;
        assert!((z.data()[0] - expected).abs() < 1e-15);
        assert!((z.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn eval_identity_and_zero_scale() {
        let eps = 1e-5;
        let mut rng = Rng::new(1);
        let y = rng.normal_tensor(DType::F64, [2, 3, 2, 2], 1.0);
        let mut p = BnParams::identity(DType::F64, 3);
        p.running_var = Tensor::full(DType::F64, [3], 1.0 - eps);
        let z = bn_eval_forward(&y, &p).unwrap();
        assert!(z.max_abs_diff(&y).unwrap() < 1e-15);
        let g = bn_eval_backward(&y, &y, &p).unwrap();
        assert!(g.dy.max_abs_diff(&y).unwrap() < 1e-15);

        p.gamma = Tensor::zeros(DType::F64, [3]);
        p.beta = Tensor::from_f64([3], vec![0.5, -1.0, 2.0]).unwrap();
        let z = bn_eval_forward(&y, &p).unwrap();
        for (k, v) in z.data().iter().enumerate() {
            assert_eq!(*v, p.beta.data()[(k / 4) % 3]);
        }
    }

    #[test]
    fn train_forward_constant_channel_gives_beta() {
        let mut p = BnParams::identity(DType::F64, 2);
        p.beta = Tensor::from_f64([2], vec![0.25, -3.0]).unwrap();
        p.gamma = Tensor::from_f64([2], vec![2.0, 5.0]).unwrap();
        let y = Tensor::from_f64([2, 2, 1, 2], vec![4.0, 4.0, 7.0, 7.0, 4.0, 4.0, 7.0, 7.0]).unwrap();
        let out = bn_train_forward(&y, &p).unwrap();
        for (k, v) in out.z.data().iter().enumerate() {
            assert_eq!(*v, p.beta.data()[(k / 2) % 2]);
        }
    }

    #[test]
    fn train_forward_moments() {
        let mut rng = Rng::new(11);
        let y = rng.normal_tensor(DType::F64, [3, 2, 4, 5], 2.0).add(&Tensor::scalar(DType::F64, 1.5)).unwrap();
        let p = BnParams::identity(DType::F64, 2);
        let out = bn_train_forward(&y, &p).unwrap();
        let z = &out.z;
        let m = 3 * 20;
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| z.data()[(b * 2 + c) * 20..][..20].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let s2 = out.stats.var.data()[c];
            assert!(mean.abs() <= 1e-10, "{mean}");
            assert!((var - s2 / (s2 + p.eps)).abs() <= 1e-10);
        }
    }

    #[test]
    fn train_backward_annihilates_constant_upstream() {
        let mut rng = Rng::new(5);
        let y = rng.normal_tensor(DType::F64, [2, 2, 3, 3], 1.0);
        let p = BnParams::identity(DType::F64, 2);
        let out = bn_train_forward(&y, &p).unwrap();
        let mut dz = vec![0.0; y.numel()];
        for (k, v) in dz.iter_mut().enumerate() {
            *v = if (k / 9) % 2 == 0 { 1.5 } else { -0.7 };
        }
        let dz = y.with_data(dz).unwrap();
        let g = bn_train_backward(&dz, &y, &out.stats, &p).unwrap();
        assert!(g.dy.max_abs() < 1e-12);
        let g0 = bn_train_backward(&y.zeros_like(), &y, &out.stats, &p).unwrap();
        assert_eq!(g0.dy.max_abs() + g0.dgamma.max_abs() + g0.dbeta.max_abs(), 0.0);
    }

    #[test]
    fn degenerate_batches() {
        let p = BnParams::identity(DType::F64, 1);
        let empty = Tensor::zeros(DType::F64, [0, 1, 2, 2]);
        assert!(matches!(bn_train_forward(&empty, &p), Err(Error::DegenerateBatch { .. })));
        let single = Tensor::from_f64([1, 1, 1, 1], vec![3.0]).unwrap();
        let out = bn_train_forward(&single, &p).unwrap();
        assert!(matches!(
            bn_train_backward(&single, &single, &out.stats, &p),
            Err(Error::DegenerateBatch { elements: 1, .. })
        ));
    }

    #[test]
    fn eval_channel_mismatch() {
        let p = BnParams::identity(DType::F64, 3);
        let y = Tensor::zeros(DType::F64, [1, 2, 2, 2]);
        assert!(matches!(bn_eval_forward(&y, &p), Err(Error::Shape(_))));
    }
}
