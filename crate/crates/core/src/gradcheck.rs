//! Finite-difference verification of every differentiable operation.
//!
//! Checks run at f64: the forward pass is re-evaluated in 64-bit for the
//! central differences and the analytic gradient is taken from the f64 tape,
//! so any disagreement is a formula bug rather than float truncation.

use crate::error::Result;
use crate::param::Param;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

/// Central-difference step. Small enough that h^2 truncation stays far below
/// TOLERANCE even for curvature-heavy compositions (stacked normalizations);
/// f64 roundoff at this step is ~1e-11.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE && self.max_rel_err.is_finite()
    }
}

/// Per-element relative error with the denominator floored at 1, so small
/// gradients are compared absolutely and large ones relatively.
pub fn compare_grads(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Check d(loss)/d(inputs) and d(loss)/d(params) of `forward` against central
/// finite differences. `params_of` re-collects the module's parameters on
/// demand so the module itself stays borrowable by `forward` between
/// perturbations.
pub fn check_module<M>(
    name: &str,
    module: &mut M,
    mut inputs: Vec<Tensor<f64>>,
    params_of: impl Fn(&mut M) -> Vec<&mut Param<f64>>,
    forward: impl Fn(&M, &mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
) -> CheckResult {
    let eval = |module: &M, inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.input(t.clone().with_grad())).collect();
        let loss = forward(module, &mut tape, &ids).expect("forward failed during gradcheck");
        tape.data(loss)[0]
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.input(t.clone().with_grad())).collect();
    let loss = forward(module, &mut tape, &ids).expect("forward failed during gradcheck");
    tape.backward(loss).expect("backward failed during gradcheck");
    let input_grads: Vec<Vec<f64>> = ids
        .iter()
        .zip(&inputs)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let param_grads: Vec<Vec<f64>> = params_of(module)
        .iter()
        .map(|p| tape.grad_of(p).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]))
        .collect();
    drop(tape);

    let mut worst = 0.0f64;
    let mut checked = 0usize;

    // Inputs: central differences one coordinate at a time.
    for (i, grad) in input_grads.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + FD_STEP;
            let hi = eval(module, &inputs);
            inputs[i].data_mut()[j] = orig - FD_STEP;
            let lo = eval(module, &inputs);
            inputs[i].data_mut()[j] = orig;
            numeric[j] = (hi - lo) / (2.0 * FD_STEP);
        }
        worst = worst.max(compare_grads(grad, &numeric));
        checked += grad.len();
    }

    // Parameters: perturb through `params_of`, evaluate with the borrow
    // released.
    for (k, grad) in param_grads.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let orig = {
                let mut ps = params_of(module);
                let orig = ps[k].value.data()[j];
                ps[k].value.data_mut()[j] = orig + FD_STEP;
                orig
            };
            let hi = eval(module, &inputs);
            {
                let mut ps = params_of(module);
                ps[k].value.data_mut()[j] = orig - FD_STEP;
            }
            let lo = eval(module, &inputs);
            {
                let mut ps = params_of(module);
                ps[k].value.data_mut()[j] = orig;
            }
            numeric[j] = (hi - lo) / (2.0 * FD_STEP);
        }
        worst = worst.max(compare_grads(grad, &numeric));
        checked += grad.len();
    }

    CheckResult { name: name.to_string(), max_rel_err: worst, checked }
}

/// Parameter-free check of a tape computation.
pub fn check_op(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    forward: impl Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
) -> CheckResult {
    check_module(name, &mut (), inputs, |_| Vec::new(), |_, t, ids| forward(t, ids))
}

/// Scalar loss that mixes every output coordinate with a fixed, non-uniform
/// weight pattern; plain sums can hide transposition mistakes.
pub fn weighted_sum(tape: &mut Tape<f64>, out: TensorId) -> Result<TensorId> {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |j| 0.4 + (1.7 * j as f64).sin());
    let wid = tape.constant(w);
    let prod = tape.mul(out, wid)?;
    Ok(tape.sum_all(prod))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_flags_corrupted_gradient() {
        let analytic = vec![1.0, 2.0, 3.0];
        let mut corrupted = analytic.clone();
        corrupted[1] += 0.05;
        assert!(compare_grads(&analytic, &analytic) <= TOLERANCE);
        assert!(compare_grads(&corrupted, &analytic) > TOLERANCE);
    }

    #[test]
    fn denominator_floor_keeps_tiny_grads_absolute() {
        let e = compare_grads(&[1e-9], &[2e-9]);
        assert!(e < 1e-8);
        let big = compare_grads(&[100.0], &[101.0]);
        assert!((big - 1.0 / 101.0).abs() < 1e-12);
    }
}

// ── Full suite ───────────────────────────────────────────────────────

mod suite {
    use super::*;
    use crate::attention::{encoder_block, multi_head, scaled_attention, EncoderParams, MultiHeadParams};
    use crate::cbam::{channel_attention, icbam, spatial_attention_i, CamParams, IsamParams};
    use crate::layers::{Phase, C3, ConvBlock, Sppf};
    use crate::loss::{detection_loss, LossWeights};
    use crate::model::{AnchorSet, Bbox, GroundTruth};
    use crate::msconv::{Msconv, MsconvConfig};
    use crate::swin::{swin_block, SwinBlockParams};
    use crate::tape::{PoolAxis, PoolMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.2..1.2))
    }

    /// Values pairwise separated well beyond the FD step, for argmax ops.
    fn randsep(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        Tensor::new(shape.to_vec(), vals).unwrap()
    }

    fn sane_boxes(rng: &mut ChaCha8Rng, m: usize) -> (Tensor<f64>, Vec<f64>) {
        loop {
            let mut p = Vec::new();
            let mut g = Vec::new();
            for _ in 0..m {
                for v in [
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.15..0.45),
                    rng.gen_range(0.15..0.45),
                ] {
                    p.push(v);
                }
                for v in [
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.15..0.45),
                    rng.gen_range(0.15..0.45),
                ] {
                    g.push(v);
                }
            }
            // keep every corner pair separated so min/max branches cannot
            // flip inside the stencil
            let corner = |b: &[f64]| {
                [b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0]
            };
            let ok = (0..m).all(|row| {
                let pc = corner(&p[row * 4..row * 4 + 4]);
                let gc = corner(&g[row * 4..row * 4 + 4]);
                (0..4).all(|j| (pc[j] - gc[j]).abs() > 0.02)
            });
            if ok {
                return (Tensor::new(vec![m, 4], p).unwrap(), g);
            }
        }
    }

    /// Finite-difference checks covering every differentiable operation once,
    /// then every composite module.
    pub fn run_all() -> Vec<CheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut results: Vec<CheckResult> = Vec::new();
        let mut push = |r: CheckResult| results.push(r);

        // ── primitive tensor ops ────────────────────────────────────
        let a = randt(&[3, 4], &mut rng);
        let b = randt(&[4], &mut rng);
        push(check_op("add", vec![a.clone(), b.clone()], |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            weighted_sum(t, y)
        }));
        push(check_op("sub", vec![a.clone(), b.clone()], |t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            weighted_sum(t, y)
        }));
        push(check_op("mul", vec![a.clone(), b.clone()], |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            weighted_sum(t, y)
        }));
        push(check_op("scale", vec![a.clone()], |t, ids| {
            let y = t.scale(ids[0], 1.7);
            weighted_sum(t, y)
        }));
        push(check_op("add_const", vec![a.clone()], |t, ids| {
            let y = t.add_const(ids[0], -0.3);
            weighted_sum(t, y)
        }));
        let m2 = randt(&[4, 2], &mut rng);
        push(check_op("matmul", vec![a.clone(), m2], |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, y)
        }));
        push(check_op("transpose", vec![a.clone()], |t, ids| {
            let y = t.transpose2d(ids[0])?;
            weighted_sum(t, y)
        }));
        push(check_op("reshape", vec![a.clone()], |t, ids| {
            let y = t.reshape(ids[0], &[2, 6])?;
            weighted_sum(t, y)
        }));
        push(check_op("gather", vec![a.clone()], |t, ids| {
            let y = t.gather(ids[0], vec![0, 7, 7, 3, 11, 2], vec![6])?;
            weighted_sum(t, y)
        }));
        push(check_op("scatter_add", vec![randt(&[5], &mut rng)], |t, ids| {
            let y = t.scatter_add(ids[0], vec![0, 3, 3, 1, 7], 9)?;
            weighted_sum(t, y)
        }));
        push(check_op("concat", vec![a.clone(), randt(&[3, 2], &mut rng)], |t, ids| {
            let y = t.concat(&[ids[0], ids[1]], 1)?;
            weighted_sum(t, y)
        }));
        let x3 = randt(&[2, 6, 6], &mut rng);
        push(check_op("pad_hw", vec![x3.clone()], |t, ids| {
            let y = t.pad_hw(ids[0], 1, 2, 0, 1)?;
            weighted_sum(t, y)
        }));
        let kern = randt(&[3, 2, 3, 3], &mut rng);
        push(check_op("conv2d", vec![x3.clone(), kern], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 2, 1)?;
            weighted_sum(t, y)
        }));
        push(check_op("unfold", vec![x3.clone()], |t, ids| {
            let y = t.unfold(ids[0], 2, 2, 0)?;
            weighted_sum(t, y)
        }));
        push(check_op("maxpool2d", vec![randsep(&[2, 6, 6], &mut rng)], |t, ids| {
            let y = t.maxpool2d(ids[0], 3, 1, 1)?;
            weighted_sum(t, y)
        }));
        let sep = randsep(&[3, 4, 4], &mut rng);
        for (name, mode, axis) in [
            ("pool_spatial_avg", PoolMode::Avg, PoolAxis::Spatial),
            ("pool_spatial_max", PoolMode::Max, PoolAxis::Spatial),
            ("pool_channel_avg", PoolMode::Avg, PoolAxis::Channel),
            ("pool_channel_max", PoolMode::Max, PoolAxis::Channel),
        ] {
            push(check_op(name, vec![sep.clone()], move |t, ids| {
                let y = t.pool_global(ids[0], mode, axis)?;
                weighted_sum(t, y)
            }));
        }
        let gsep = randsep(&[3, 7], &mut rng);
        push(check_op("group_pool_avg", vec![gsep.clone()], |t, ids| {
            let y = t.group_pool(ids[0], 3, PoolMode::Avg)?;
            weighted_sum(t, y)
        }));
        push(check_op("group_pool_max", vec![gsep], |t, ids| {
            let y = t.group_pool(ids[0], 3, PoolMode::Max)?;
            weighted_sum(t, y)
        }));
        push(check_op("softmax", vec![a.clone()], |t, ids| {
            let y = t.softmax(ids[0], 1)?;
            weighted_sum(t, y)
        }));
        push(check_op("sigmoid", vec![a.clone()], |t, ids| {
            let y = t.sigmoid(ids[0]);
            weighted_sum(t, y)
        }));
        push(check_op("silu", vec![a.clone()], |t, ids| {
            let y = t.silu(ids[0]);
            weighted_sum(t, y)
        }));
        let away_from_zero = Tensor::from_fn(&[2, 5], |i| {
            let v = 0.1 + 0.08 * (i as f64);
            if i % 2 == 0 {
                v
            } else {
                -v
            }
        });
        push(check_op("relu", vec![away_from_zero], |t, ids| {
            let y = t.relu(ids[0]);
            weighted_sum(t, y)
        }));
        let g1 = randt(&[4], &mut rng);
        let b1 = randt(&[4], &mut rng);
        push(check_op("layer_norm", vec![a.clone(), g1, b1], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(t, y)
        }));
        let gb = randt(&[3], &mut rng);
        let bb = randt(&[3], &mut rng);
        push(check_op("batch_norm", vec![randt(&[3, 4, 4], &mut rng), gb, bb], |t, ids| {
            let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], 1e-3)?;
            weighted_sum(t, y)
        }));
        push(check_op("sum_all", vec![a.clone()], |t, ids| Ok(t.sum_all(ids[0]))));
        push(check_op("mean_all", vec![a.clone()], |t, ids| Ok(t.mean_all(ids[0]))));
        push(check_op("clamp01", vec![randt(&[6], &mut rng)], |t, ids| {
            let y = t.clamp01(ids[0]);
            weighted_sum(t, y)
        }));
        let targets: Vec<f64> = (0..8).map(|i| (i as f64 * 0.13) % 1.0).collect();
        let tg = targets.clone();
        push(check_op("bce", vec![randt(&[8], &mut rng)], move |t, ids| {
            let act = t.sigmoid(ids[0]);
            t.bce(act, tg.clone())
        }));
        push(check_op(
            "bce_pair",
            vec![randt(&[8], &mut rng), randt(&[8], &mut rng)],
            |t, ids| {
                let act = t.sigmoid(ids[0]);
                let tgt = t.sigmoid(ids[1]);
                t.bce_pair(act, tgt)
            },
        ));
        let (pred, gt) = sane_boxes(&mut rng, 3);
        let gtc = gt.clone();
        push(check_op("ciou_loss", vec![pred.clone()], move |t, ids| {
            t.ciou_loss(ids[0], gtc.clone())
        }));
        push(check_op("ciou_values", vec![pred], move |t, ids| {
            let v = t.ciou_values(ids[0], gt.clone())?;
            weighted_sum(t, v)
        }));

        // ── composite modules ───────────────────────────────────────
        push(check_op(
            "scaled_attention",
            vec![randt(&[4, 3], &mut rng), randt(&[4, 3], &mut rng), randt(&[4, 3], &mut rng)],
            |t, ids| {
                let y = scaled_attention(t, ids[0], ids[1], ids[2], None, None)?;
                weighted_sum(t, y)
            },
        ));
        {
            let mut p = MultiHeadParams::<f64>::new(4, 2, &mut rng).unwrap();
            push(check_module(
                "multi_head",
                &mut p,
                vec![randt(&[3, 4], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = multi_head(t, ids[0], m, None, None)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let mut p = EncoderParams::<f64>::new(4, 2, &mut rng).unwrap();
            push(check_module(
                "encoder_block",
                &mut p,
                vec![randt(&[3, 4], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = encoder_block(t, ids[0], m)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let cfg = MsconvConfig {
                in_channels: 2,
                out_channels: 4,
                kernel: 2,
                conv_stride: 2,
                conv_padding: 2,
                n_heads: 2,
            };
            let mut m = Msconv::<f64>::new(cfg, &mut rng).unwrap();
            push(check_module(
                "msconv_forward",
                &mut m,
                vec![randt(&[2, 8, 8], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = m.forward(t, ids[0])?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let mut p = SwinBlockParams::<f64>::new(4, 2, 2, &mut rng).unwrap();
            push(check_module(
                "swin_block",
                &mut p,
                vec![randt(&[4, 4, 4], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = swin_block(t, ids[0], m)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let mut p = CamParams::<f64>::new(4, 2, &mut rng).unwrap();
            push(check_module(
                "channel_attention",
                &mut p,
                vec![randt(&[4, 5, 5], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = channel_attention(t, ids[0], m)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let mut p = IsamParams::<f64>::new(&mut rng);
            push(check_module(
                "spatial_attention_i",
                &mut p,
                vec![randsep(&[3, 8, 8], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = spatial_attention_i(t, ids[0], m)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            struct Both {
                cam: CamParams<f64>,
                isam: IsamParams<f64>,
            }
            let mut m = Both {
                cam: CamParams::new(4, 2, &mut rng).unwrap(),
                isam: IsamParams::new(&mut rng),
            };
            push(check_module(
                "icbam",
                &mut m,
                vec![randsep(&[4, 6, 6], &mut rng)],
                |m| {
                    let mut v: Vec<&mut Param<f64>> =
                        m.cam.params_mut().into_iter().map(|(_, q)| q).collect();
                    v.extend(m.isam.params_mut().into_iter().map(|(_, q)| q));
                    v
                },
                |m, t, ids| {
                    let y = icbam(t, ids[0], &m.cam, &m.isam)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let mut m = ConvBlock::<f64>::new(2, 3, 3, 2, &mut rng);
            push(check_module(
                "conv_block",
                &mut m,
                vec![randt(&[2, 6, 6], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = m.forward(t, ids[0], Phase::Train)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let mut m = C3::<f64>::new(2, 4, 1, true, &mut rng).unwrap();
            push(check_module(
                "c3_block",
                &mut m,
                vec![randt(&[2, 4, 4], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = m.forward(t, ids[0], Phase::Train)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let mut m = Sppf::<f64>::new(4, 4, 3, &mut rng).unwrap();
            push(check_module(
                "sppf_block",
                &mut m,
                vec![randsep(&[4, 5, 5], &mut rng)],
                |m| m.params_mut().into_iter().map(|(_, q)| q).collect(),
                |m, t, ids| {
                    let y = m.forward(t, ids[0], Phase::Train)?;
                    weighted_sum(t, y)
                },
            ));
        }
        {
            let anchors = AnchorSet::default_for(32);
            let gts = vec![GroundTruth { class_id: 0, bbox: Bbox::new(0.42, 0.57, 0.3, 0.33) }];
            let inputs: Vec<Tensor<f64>> = [4usize, 2, 1]
                .iter()
                .map(|&g| randt(&[21, g, g], &mut rng))
                .collect();
            push(check_op("detection_loss", inputs, move |t, ids| {
                let raws = [ids[0], ids[1], ids[2]];
                let (total, _) =
                    detection_loss(t, &raws, &gts, &anchors, 32, 2, &LossWeights::default())?;
                Ok(total)
            }));
        }

        results
    }
}

pub use suite::run_all;
