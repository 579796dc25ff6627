use convbn::ops::{
    bn_train_forward, conv2d, conv2d_grads, ema_update, rotate_kernel, scale_out_channels, BnParams, ConvGeometry,
};
use convbn::{DType, Rng, Tensor};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Case {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    seed: u64,
}

fn case(max_n: usize, max_c: usize, max_hw: usize, unit_stride: bool) -> impl Strategy<Value = Case> {
    let s_hi: usize = if unit_stride { 2 } else { 3 };
    (1..=max_n, 1..=max_c, 1..=max_c, 1usize..=3, 1usize..=3, 1..s_hi, 1..s_hi, 0usize..=1, 0usize..=1, any::<u64>())
        .prop_flat_map(move |(n, c_in, c_out, kh, kw, sh, sw, ph, pw, seed)| {
            let (ph, pw) = (ph.min(kh - 1), pw.min(kw - 1));
            let lo_h = kh.saturating_sub(2 * ph).max(1);
            let lo_w = kw.saturating_sub(2 * pw).max(1);
            (lo_h..=max_hw, lo_w..=max_hw).prop_map(move |(h, w)| Case {
                n,
                c_in,
                c_out,
                h,
                w,
                k: (kh, kw),
                stride: (sh, sw),
                pad: (ph, pw),
                seed,
            })
        })
}

impl Case {
    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.pad)
    }

    fn tensors(&self) -> (Tensor, Tensor, Tensor) {
        let mut r = Rng::new(self.seed);
        let x = r.normal_tensor(DType::F64, [self.n, self.c_in, self.h, self.w], 1.0);
        let w = r.normal_tensor(DType::F64, [self.c_out, self.c_in, self.k.0, self.k.1], 1.0);
        let b = r.normal_tensor(DType::F64, [self.c_out], 1.0);
        (x, w, b)
    }
}

/// Direct evaluation of the correlation, summing over c, u, v and adding the
/// bias last.
fn brute_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Tensor {
    let [n, ci, h, wd] = <[usize; 4]>::try_from(x.dims()).unwrap();
    let [co, _, kh, kw] = <[usize; 4]>::try_from(w.dims()).unwrap();
    let ho = (h + 2 * g.padding.0 - kh) / g.stride.0 + 1;
    let wo = (wd + 2 * g.padding.1 - kw) / g.stride.1 + 1;
    let (xs, ws) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * co * ho * wo);
    for b_ in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * g.stride.0 + u) as isize - g.padding.0 as isize;
                                let s = (j * g.stride.1 + v) as isize - g.padding.1 as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += ws[((o * ci + c) * kh + u) * kw + v]
                                    * xs[((b_ * ci + c) * h + r as usize) * wd + s as usize];
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[o];
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_f64([n, co, ho, wo], out).unwrap()
}

fn scale_tol(t: &Tensor) -> f64 {
    1e-12 * t.max_abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_evaluation(c in case(2, 4, 8, false), with_bias in any::<bool>()) {
        let (x, w, b) = c.tensors();
        let b = with_bias.then_some(&b);
        let got = conv2d(&x, &w, b, c.geometry()).unwrap();
        prop_assert_eq!(got, brute_conv(&x, &w, b, c.geometry()));
    }

    #[test]
    fn input_gradient_is_rotated_kernel_correlation(c in case(2, 3, 7, true)) {
        let (x, w, _) = c.tensors();
        let y = conv2d(&x, &w, None, c.geometry()).unwrap();
        let dy = Rng::new(c.seed ^ 7).normal_tensor(DType::F64, y.shape().clone(), 1.0);
        let grads = conv2d_grads(&x, &w, c.geometry(), &dy).unwrap();
        let full = ConvGeometry::new((1, 1), (c.k.0 - 1 - c.pad.0, c.k.1 - 1 - c.pad.1));
        let via_rot = conv2d(&dy, &rotate_kernel(&w).unwrap(), None, full).unwrap();
        prop_assert!(grads.dx.max_abs_diff(&via_rot).unwrap() <= scale_tol(&via_rot));
    }

    #[test]
    fn conv_gradients_satisfy_adjoint_identities(c in case(2, 3, 7, false)) {
        let (x, w, b) = c.tensors();
        let g = c.geometry();
        let y = conv2d(&x, &w, None, g).unwrap();
        let mut r = Rng::new(c.seed ^ 11);
        let dy = r.normal_tensor(DType::F64, y.shape().clone(), 1.0);
        let dx_probe = r.normal_tensor(DType::F64, x.shape().clone(), 1.0);
        let dw_probe = r.normal_tensor(DType::F64, w.shape().clone(), 1.0);
        let grads = conv2d_grads(&x, &w, g, &dy).unwrap();
        // Linear in x and in w separately.
        let lhs_x = conv2d(&dx_probe, &w, None, g).unwrap().dot(&dy).unwrap();
        let rhs_x = grads.dx.dot(&dx_probe).unwrap();
        let lhs_w = conv2d(&x, &dw_probe, None, g).unwrap().dot(&dy).unwrap();
        let rhs_w = grads.dweight.dot(&dw_probe).unwrap();
        prop_assert!((lhs_x - rhs_x).abs() <= 1e-10 * lhs_x.abs().max(1.0));
        prop_assert!((lhs_w - rhs_w).abs() <= 1e-10 * lhs_w.abs().max(1.0));
        // Bias gradient is the channel sum of dy.
        let with_b = conv2d(&x, &w, Some(&b), g).unwrap();
        let db_dot = with_b.sub(&y).unwrap().dot(&dy).unwrap();
        prop_assert!((db_dot - grads.dbias.dot(&b).unwrap()).abs() <= 1e-10 * db_dot.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn channel_scaling_commutes_with_conv(c in case(2, 4, 8, false)) {
        let (x, w, _) = c.tensors();
        let coeff = Rng::new(c.seed ^ 3).uniform_tensor(DType::F64, [c.c_out], -3.0, 3.0);
        let g = c.geometry();
        let lhs = conv2d(&x, &scale_out_channels(&w, &coeff).unwrap(), None, g).unwrap();
        let y = conv2d(&x, &w, None, g).unwrap();
        let per: usize = y.dims()[2] * y.dims()[3];
        let data = y.data().iter().enumerate().map(|(k, v)| v * coeff.data()[(k / per) % c.c_out]).collect();
        let rhs = y.with_data(data).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn train_bn_output_is_centred_and_unit_variance(
        n in 1usize..4, ch in 1usize..5, h in 1usize..5, w in 2usize..5, seed in any::<u64>(), shift in -50.0f64..50.0
    ) {
        let y = Rng::new(seed).normal_tensor(DType::F64, [n, ch, h, w], 3.0).map(|v| v + shift);
        let out = bn_train_forward(&y, &BnParams::identity(DType::F64, ch)).unwrap();
        let m = n * h * w;
        let plane = h * w;
        for c in 0..ch {
            let vals: Vec<f64> = out.z.data().iter().enumerate()
                .filter(|(k, _)| (k / plane) % ch == c).map(|(_, v)| *v).collect();
            prop_assert_eq!(vals.len(), m);
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            prop_assert!(mean.abs() <= 1e-10, "mean {mean}");
            let bv = out.stats.var.data()[c];
            prop_assert!((var - bv / (bv + 1e-5)).abs() <= 1e-8, "var {var}");
        }
    }

    #[test]
    fn ema_matches_closed_form(
        r in prop::collection::vec(-10.0f64..10.0, 1..8), seed in any::<u64>(), alpha in 0.0f64..=1.0
    ) {
        let running = Tensor::from_f64([r.len()], r.clone()).unwrap();
        let batch = Rng::new(seed).normal_tensor(DType::F64, [r.len()], 2.0);
        let got = ema_update(&running, &batch, alpha).unwrap();
        for ((g, r), b) in got.data().iter().zip(&r).zip(batch.data()) {
            prop_assert_eq!(*g, r + alpha * (b - r));
        }
    }
}

#[test]
fn ema_endpoints() {
    let r = Tensor::from_f64([3], vec![1.0, -2.0, 0.5]).unwrap();
    let b = Tensor::from_f64([3], vec![4.0, 0.0, -1.0]).unwrap();
    assert_eq!(ema_update(&r, &b, 0.0).unwrap(), r);
    assert_eq!(ema_update(&r, &b, 1.0).unwrap(), b);
}

#[test]
fn rotate_kernel_is_an_involution_up_to_channel_swap() {
    let w = Rng::new(5).normal_tensor(DType::F64, [3, 2, 3, 2], 1.0);
    let twice = rotate_kernel(&rotate_kernel(&w).unwrap()).unwrap();
    assert_eq!(twice, w);
}
