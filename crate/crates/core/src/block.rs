//! A convolution followed by batch normalization, runnable in four modes.
//!
//! | mode   | forward                                   | retained for backward |
//! |--------|-------------------------------------------|-----------------------|
//! | Train  | conv, BN with batch statistics, EMA update | `X`, `x_hat`, stats   |
//! | Eval   | conv, BN with running statistics           | `X`, `Y`              |
//! | Tune   | conv with weights fused on every call      | `X`, `w'`, `b'`       |
//! | Deploy | conv with weights fused once               | `X`                   |
//!
//! Tune and Eval compute the same function of `(w, b, gamma, beta)`, so their
//! gradients agree; Deploy trains the fused weights directly and its weight
//! gradient is the Eval gradient divided by `gamma / sqrt(var + eps)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorMap;
use crate::ops::{
    self, bn_eval_backward, bn_eval_forward, bn_train_backward_normalized, bn_train_forward,
    conv2d, conv2d_grads, scale_out_channels, BatchStats, BnParams, ConvGeometry, ConvParams,
};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
    Tune,
    Deploy,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Train, Mode::Eval, Mode::Tune, Mode::Deploy];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Tune => "tune",
            Mode::Deploy => "deploy",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            "tune" => Ok(Mode::Tune),
            "deploy" => Ok(Mode::Deploy),
            other => Err(Error::Input(format!("unknown mode {other:?}"))),
        }
    }
}

/// `gamma[o] / sqrt(var[o] + eps)`, computed as `gamma * rsqrt(var + eps)`.
pub fn scaling_coefficients_of(bn: &BnParams) -> Result<Tensor> {
    bn.gamma.mul(&bn.inv_std()?)
}

/// Folds BN into the conv: `w' = c * w`, `b' = (b - mu_hat) * c + beta` with
/// `c = gamma / sqrt(var_hat + eps)` applied per output channel. A missing
/// conv bias counts as zero.
pub fn fuse_params(conv_weight: &Tensor, conv_bias: Option<&Tensor>, bn: &BnParams) -> Result<(Tensor, Tensor)> {
    check_channels(conv_weight, bn)?;
    let coeff = scaling_coefficients_of(bn)?;
    let weight = scale_out_channels(conv_weight, &coeff)?;
    let bias = match conv_bias {
        Some(b) => b.sub(&bn.running_mean)?,
        None => bn.running_mean.map(|m| -m),
    };
    let bias = bias.mul(&coeff)?.add(&bn.beta)?;
    Ok((weight, bias))
}

fn check_channels(weight: &Tensor, bn: &BnParams) -> Result<()> {
    bn.validate()?;
    if weight.rank() < 1 || weight.dims()[0] != bn.channels() {
        return Err(Error::shape(format!(
            "conv weight {} has a different output channel count than bn ({})",
            weight.shape(),
            bn.channels()
        )));
    }
    Ok(())
}

/// Statistics frozen when Tune mode is switched on.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneBuffers {
    /// `rsqrt(running_var + eps)`, shaped `[C_out, 1, 1, 1]`.
    pub weight_coeff: Tensor,
    /// `-running_mean`, shaped `[C_out]`.
    pub bias_delta: Tensor,
}

impl TuneBuffers {
    pub fn from_bn(bn: &BnParams) -> Result<TuneBuffers> {
        bn.validate()?;
        let c = bn.channels();
        Ok(TuneBuffers {
            weight_coeff: bn.inv_std()?.reshape([c, 1, 1, 1])?,
            bias_delta: bn.running_mean.map(|m| -m),
        })
    }

    pub fn channels(&self) -> usize {
        self.bias_delta.numel()
    }

    /// `weight_coeff * gamma`, flattened to `[C_out]`.
    pub fn coefficients(&self, gamma: &Tensor) -> Result<Tensor> {
        let wc = self.weight_coeff.reshape([self.channels()])?;
        wc.mul(gamma)
    }
}

/// Fused weight and bias recomputed from the live parameters.
pub fn tune_fused_params(
    weight: &Tensor,
    bias: Option<&Tensor>,
    gamma: &Tensor,
    beta: &Tensor,
    buffers: &TuneBuffers,
) -> Result<(Tensor, Tensor)> {
    let coeff = buffers.coefficients(gamma)?;
    let fused_weight = scale_out_channels(weight, &coeff)?;
    let shifted = match bias {
        Some(b) => b.add(&buffers.bias_delta)?,
        None => buffers.bias_delta.clone(),
    };
    let fused_bias = shifted.mul(&coeff)?.add(beta)?;
    Ok((fused_weight, fused_bias))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Backward of the Tune forward.
///
/// With `dw'` and `db' = sum dZ` from the fused convolution:
/// `dw = c * dw'`, `db = c * db'`, `dbeta = db'`, and
/// `dgamma[o] = sum(dw'[o] * w[o]) * k[o] + db'[o] * (b[o] - mu_hat[o]) * k[o]`
/// where `k = rsqrt(var_hat + eps)` and `c = k * gamma`.
#[allow(clippy::too_many_arguments)]
pub fn tune_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    gamma: &Tensor,
    buffers: &TuneBuffers,
    fused_weight: &Tensor,
    geometry: ConvGeometry,
    dz: &Tensor,
) -> Result<TuneGrads> {
    let g = conv2d_grads(x, fused_weight, geometry, dz)?;
    let k = buffers.weight_coeff.reshape([buffers.channels()])?;
    let coeff = k.mul(gamma)?;
    let dweight = scale_out_channels(&g.dweight, &coeff)?;
    let dbias = g.dbias.mul(&coeff)?;
    let c_out = buffers.channels();
    let per = weight.numel() / c_out.max(1);
    let shifted = match bias {
        Some(b) => b.add(&buffers.bias_delta)?,
        None => buffers.bias_delta.clone(),
    };
    let mut dgamma = vec![0.0; c_out];
    for (o, slot) in dgamma.iter_mut().enumerate() {
        let dw = &g.dweight.data()[o * per..][..per];
        let w = &weight.data()[o * per..][..per];
        let through_weight: f64 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
        *slot = through_weight * k.data()[o] + g.dbias.data()[o] * shifted.data()[o] * k.data()[o];
    }
    Ok(TuneGrads {
        dgamma: Tensor::new(dz.dtype(), [c_out], dgamma)?,
        dbeta: g.dbias.clone(),
        dx: g.dx,
        dweight,
        dbias,
    })
}

/// Tensors a forward pass leaves behind for its backward.
#[derive(Clone, Debug, PartialEq)]
pub enum Saved {
    Train {
        x: Tensor,
        x_hat: Tensor,
        stats: BatchStats,
    },
    Eval {
        x: Tensor,
        y: Tensor,
    },
    Tune {
        x: Tensor,
        fused_weight: Tensor,
        fused_bias: Tensor,
    },
    Deploy {
        x: Tensor,
    },
}

impl Saved {
    pub fn mode(&self) -> Mode {
        match self {
            Saved::Train { .. } => Mode::Train,
            Saved::Eval { .. } => Mode::Eval,
            Saved::Tune { .. } => Mode::Tune,
            Saved::Deploy { .. } => Mode::Deploy,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Saved::Train { x, x_hat, stats } => vec![
                ("X", x),
                ("x_hat", x_hat),
                ("batch_mean", &stats.mean),
                ("batch_var", &stats.var),
            ],
            Saved::Eval { x, y } => vec![("X", x), ("Y", y)],
            Saved::Tune {
                x,
                fused_weight,
                fused_bias,
            } => vec![("X", x), ("w_fused", fused_weight), ("b_fused", fused_bias)],
            Saved::Deploy { x } => vec![("X", x)],
        }
    }

    pub fn elements(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningUpdate {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockForward {
    pub z: Tensor,
    pub saved: Saved,
    /// Train mode only; the caller decides whether to apply it.
    pub running: Option<RunningUpdate>,
}

/// Gradients of one block. In Deploy mode `dweight`/`dbias` are with respect
/// to the fused parameters and `dgamma`/`dbeta` are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Option<Tensor>,
    pub dgamma: Option<Tensor>,
    pub dbeta: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub conv: ConvParams,
    pub bn: BnParams,
}

/// Mutable access to the trainable tensors of a block.
pub struct Trainables<'a> {
    pub weight: &'a mut Tensor,
    pub bias: Option<&'a mut Tensor>,
    pub gamma: Option<&'a mut Tensor>,
    pub beta: Option<&'a mut Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnBlock {
    conv: ConvParams,
    bn: Option<BnParams>,
    mode: Mode,
    tune: Option<TuneBuffers>,
    snapshot: Option<Snapshot>,
}

impl ConvBnBlock {
    /// New block in Eval mode.
    pub fn new(conv: ConvParams, bn: BnParams) -> Result<ConvBnBlock> {
        conv.validate()?;
        check_channels(&conv.weight, &bn)?;
        Ok(ConvBnBlock {
            conv,
            bn: Some(bn),
            mode: Mode::Eval,
            tune: None,
            snapshot: None,
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Result<ConvBnBlock> {
        self.set_mode(mode)?;
        Ok(self)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn conv(&self) -> &ConvParams {
        &self.conv
    }

    /// Absent in Deploy mode.
    pub fn bn(&self) -> Option<&BnParams> {
        self.bn.as_ref()
    }

    pub fn tune_buffers(&self) -> Option<&TuneBuffers> {
        self.tune.as_ref()
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    pub fn trainables_mut(&mut self) -> Trainables<'_> {
        let (gamma, beta) = match self.bn.as_mut() {
            Some(bn) => (Some(&mut bn.gamma), Some(&mut bn.beta)),
            None => (None, None),
        };
        Trainables {
            weight: &mut self.conv.weight,
            bias: self.conv.bias.as_mut(),
            gamma,
            beta,
        }
    }

    /// Switches mode. Leaving Deploy restores the pre-fusion snapshot first;
    /// entering Tune freezes the current running statistics.
    pub fn set_mode(&mut self, target: Mode) -> Result<()> {
        if self.mode == target {
            return Ok(());
        }
        if self.mode == Mode::Deploy {
            self.revert();
        }
        match target {
            Mode::Train | Mode::Eval => {
                self.tune = None;
            }
            Mode::Tune => {
                self.tune = Some(TuneBuffers::from_bn(self.bn_ref()?)?);
            }
            Mode::Deploy => {
                let bn = self.bn.take().ok_or_else(|| Error::Mode("no bn to fuse".into()))?;
                let (w, b) = fuse_params(&self.conv.weight, self.conv.bias.as_ref(), &bn)?;
                self.snapshot = Some(Snapshot {
                    conv: self.conv.clone(),
                    bn,
                });
                self.conv.weight = w;
                self.conv.bias = Some(b);
                self.tune = None;
            }
        }
        self.mode = target;
        Ok(())
    }

    /// Undoes Tune or Deploy, restoring the pre-fusion parameters bitwise.
    /// Returns false when there was nothing to undo.
    pub fn revert(&mut self) -> bool {
        match self.mode {
            Mode::Deploy => {
                let snap = self.snapshot.take().expect("deploy blocks carry a snapshot");
                self.conv = snap.conv;
                self.bn = Some(snap.bn);
                self.mode = Mode::Eval;
                true
            }
            Mode::Tune => {
                self.tune = None;
                self.mode = Mode::Eval;
                true
            }
            Mode::Train | Mode::Eval => false,
        }
    }

    fn bn_ref(&self) -> Result<&BnParams> {
        self.bn
            .as_ref()
            .ok_or_else(|| Error::Mode("block is in deploy mode; bn parameters were consumed".into()))
    }

    pub fn scaling_coefficients(&self) -> Result<Tensor> {
        scaling_coefficients_of(self.bn_ref()?)
    }

    /// Replaces running statistics with a Train-mode update.
    pub fn apply_running_update(&mut self, update: RunningUpdate) -> Result<()> {
        if self.mode != Mode::Train {
            return Err(Error::Mode(format!(
                "running statistics are frozen in {} mode",
                self.mode
            )));
        }
        let bn = self.bn.as_mut().expect("train mode has bn");
        if update.running_mean.shape() != bn.running_mean.shape()
            || update.running_var.shape() != bn.running_var.shape()
        {
            return Err(Error::shape("running update has the wrong channel count"));
        }
        bn.running_mean = update.running_mean;
        bn.running_var = update.running_var;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<BlockForward> {
        self.forward_as(self.mode, x)
    }

    /// Runs the computation of `mode` against this block's state. Any mode can
    /// be evaluated on a non-Deploy block except Deploy itself; a Deploy block
    /// only runs Deploy.
    pub fn forward_as(&self, mode: Mode, x: &Tensor) -> Result<BlockForward> {
        let geometry = self.conv.geometry;
        match (mode, self.mode) {
            (Mode::Deploy, Mode::Deploy) => {
                let z = conv2d(x, &self.conv.weight, self.conv.bias.as_ref(), geometry)?;
                Ok(BlockForward {
                    z,
                    saved: Saved::Deploy { x: x.clone() },
                    running: None,
                })
            }
            (Mode::Deploy, _) => Err(Error::Mode(format!(
                "deploy forward needs fused parameters; block is in {} mode",
                self.mode
            ))),
            (_, Mode::Deploy) => Err(Error::Mode(format!(
                "{mode} forward on a deploy block: bn parameters were consumed"
            ))),
            (Mode::Train, _) => {
                let bn = self.bn_ref()?;
                let y = conv2d(x, &self.conv.weight, self.conv.bias.as_ref(), geometry)?;
                let out = bn_train_forward(&y, bn)?;
                Ok(BlockForward {
                    z: out.z,
                    saved: Saved::Train {
                        x: x.clone(),
                        x_hat: out.x_hat,
                        stats: out.stats,
                    },
                    running: Some(RunningUpdate {
                        running_mean: out.running_mean,
                        running_var: out.running_var,
                    }),
                })
            }
            (Mode::Eval, _) => {
                let bn = self.bn_ref()?;
                let y = conv2d(x, &self.conv.weight, self.conv.bias.as_ref(), geometry)?;
                let z = bn_eval_forward(&y, bn)?;
                Ok(BlockForward {
                    z,
                    saved: Saved::Eval { x: x.clone(), y },
                    running: None,
                })
            }
            (Mode::Tune, _) => {
                let bn = self.bn_ref()?;
                let fresh;
                let buffers = match &self.tune {
                    Some(b) => b,
                    None => {
                        fresh = TuneBuffers::from_bn(bn)?;
                        &fresh
                    }
                };
                let (fused_weight, fused_bias) = tune_fused_params(
                    &self.conv.weight,
                    self.conv.bias.as_ref(),
                    &bn.gamma,
                    &bn.beta,
                    buffers,
                )?;
                let z = conv2d(x, &fused_weight, Some(&fused_bias), geometry)?;
                Ok(BlockForward {
                    z,
                    saved: Saved::Tune {
                        x: x.clone(),
                        fused_weight,
                        fused_bias,
                    },
                    running: None,
                })
            }
        }
    }

    pub fn backward(&self, saved: &Saved, dz: &Tensor) -> Result<BlockGrads> {
        let geometry = self.conv.geometry;
        let has_bias = self.conv.bias.is_some();
        match saved {
            Saved::Deploy { x } => {
                if self.mode != Mode::Deploy {
                    return Err(Error::Mode(format!(
                        "deploy saved state passed to a {} block",
                        self.mode
                    )));
                }
                let g = conv2d_grads(x, &self.conv.weight, geometry, dz)?;
                Ok(BlockGrads {
                    dx: g.dx,
                    dweight: g.dweight,
                    dbias: Some(g.dbias),
                    dgamma: None,
                    dbeta: None,
                })
            }
            Saved::Eval { x, y } => {
                let bn = self.bn_ref()?;
                let bg = bn_eval_backward(dz, y, bn)?;
                let g = conv2d_grads(x, &self.conv.weight, geometry, &bg.dy)?;
                Ok(BlockGrads {
                    dx: g.dx,
                    dweight: g.dweight,
                    dbias: has_bias.then_some(g.dbias),
                    dgamma: Some(bg.dgamma),
                    dbeta: Some(bg.dbeta),
                })
            }
            Saved::Train { x, x_hat, stats } => {
                let bn = self.bn_ref()?;
                let bg = bn_train_backward_normalized(dz, x_hat, stats, bn)?;
                let g = conv2d_grads(x, &self.conv.weight, geometry, &bg.dy)?;
                Ok(BlockGrads {
                    dx: g.dx,
                    dweight: g.dweight,
                    dbias: has_bias.then_some(g.dbias),
                    dgamma: Some(bg.dgamma),
                    dbeta: Some(bg.dbeta),
                })
            }
            Saved::Tune { x, fused_weight, .. } => {
                let bn = self.bn_ref()?;
                let fresh;
                let buffers = match &self.tune {
                    Some(b) => b,
                    None => {
                        fresh = TuneBuffers::from_bn(bn)?;
                        &fresh
                    }
                };
                let g = tune_backward(
                    x,
                    &self.conv.weight,
                    self.conv.bias.as_ref(),
                    &bn.gamma,
                    buffers,
                    fused_weight,
                    geometry,
                    dz,
                )?;
                Ok(BlockGrads {
                    dx: g.dx,
                    dweight: g.dweight,
                    dbias: has_bias.then_some(g.dbias),
                    dgamma: Some(g.dgamma),
                    dbeta: Some(g.dbeta),
                })
            }
        }
    }

    /// Parameters under the reserved names `conv.weight`, `conv.bias`,
    /// `bn.gamma`, `bn.beta`, `bn.running_mean`, `bn.running_var`. Deploy
    /// blocks only have the conv entries (holding the fused values).
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("conv.weight".into(), self.conv.weight.clone());
        if let Some(b) = &self.conv.bias {
            m.insert("conv.bias".into(), b.clone());
        }
        if let Some(bn) = &self.bn {
            m.insert("bn.gamma".into(), bn.gamma.clone());
            m.insert("bn.beta".into(), bn.beta.clone());
            m.insert("bn.running_mean".into(), bn.running_mean.clone());
            m.insert("bn.running_var".into(), bn.running_var.clone());
        }
        m
    }

    /// Eval-mode block from a map written by [`ConvBnBlock::to_tensor_map`].
    pub fn from_tensor_map(map: &TensorMap, geometry: ConvGeometry, eps: f64, momentum: f64) -> Result<ConvBnBlock> {
        let required = [
            "conv.weight",
            "bn.gamma",
            "bn.beta",
            "bn.running_mean",
            "bn.running_var",
        ];
        let missing: Vec<String> = required
            .iter()
            .filter(|k| !map.contains_key(**k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Ingestion { missing });
        }
        let conv = ConvParams::new(map["conv.weight"].clone(), map.get("conv.bias").cloned(), geometry)?;
        let bn = BnParams {
            gamma: map["bn.gamma"].clone(),
            beta: map["bn.beta"].clone(),
            running_mean: map["bn.running_mean"].clone(),
            running_var: map["bn.running_var"].clone(),
            eps,
            momentum,
        };
        ConvBnBlock::new(conv, bn)
    }

    /// Output shape for an input of shape `x`.
    pub fn output_shape(&self, x: &Shape) -> Result<Shape> {
        let d = x.dims();
        if d.len() != 4 {
            return Err(Error::shape(format!("block input must be rank 4, got {x}")));
        }
        let (kh, kw) = self.conv.kernel();
        let (ho, wo) = self.conv.geometry.output_hw(d[2], d[3], kh, kw)?;
        Ok(Shape::from([d[0], self.conv.out_channels(), ho, wo]))
    }
}

/// Identity-normalising BN for a conv: `gamma = 1`, `beta = 0`, `mu = 0`,
/// `var = 1 - eps`.
pub fn identity_bn(dtype: crate::tensor::DType, channels: usize) -> BnParams {
    let mut bn = BnParams::identity(dtype, channels);
    bn.running_var = Tensor::full(dtype, [channels], 1.0 - ops::DEFAULT_EPS);
    bn
}
