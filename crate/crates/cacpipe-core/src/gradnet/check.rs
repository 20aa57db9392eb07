//! Finite-difference verification of the analytic gradients.
//!
//! Every check runs on a full f64 replica of the network so the comparison
//! is limited by truncation error of the central difference, not storage
//! precision.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::backward::backward_range;
use super::forward::forward_train;
use super::loss::{l1_log_loss, ncc_loss};
use super::spec::{LayerSpec, NetSpec};
use super::state::NetState;
use super::tensor::Tensor;
use super::warp::{spatial_transform_3d, spatial_transform_3d_backward};
use crate::error::{CoreError, Result};
use crate::rng::rng_from_seed;
use rand::Rng;

/// Central-difference step.
const FD_STEP: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Configuration name.
    pub name: String,
    /// Number of parameters compared.
    pub n_params: usize,
    /// Largest relative error across all parameters.
    pub max_rel: f64,
    /// Relative-error tolerance for this configuration.
    pub tol: f64,
    /// Largest relative error per parameterized layer.
    pub per_layer: Vec<(usize, f64)>,
}

impl GradCheckReport {
    /// True when the worst relative error is inside tolerance.
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = (a.abs() + n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Mean L1-log loss over every output element against `targets`.
fn net_loss(out: &Tensor<f64>, targets: &[f64]) -> Result<(f64, Tensor<f64>)> {
    if out.data.len() != targets.len() {
        return Err(CoreError::invalid("target count mismatch"));
    }
    let k = out.data.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(&out.shape);
    for (i, (&p, &t)) in out.data.iter().zip(targets.iter()).enumerate() {
        let (l, g) = l1_log_loss(p, t)?;
        total += l / k;
        grad.data[i] = g / k;
    }
    Ok((total, grad))
}

/// Compares analytic parameter gradients against central finite differences
/// for a small network, under a mean L1-log loss with the given targets.
pub fn grad_check(
    spec: &NetSpec,
    input: &Tensor<f64>,
    targets: &[f64],
    seed: u64,
    name: &str,
) -> Result<GradCheckReport> {
    grad_check_with_step(spec, input, targets, seed, name, FD_STEP, 1e-4)
}

fn grad_check_with_step(
    spec: &NetSpec,
    input: &Tensor<f64>,
    targets: &[f64],
    seed: u64,
    name: &str,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if spec.param_count() >= 10_000 {
        return Err(CoreError::invalid("gradient check expects a tiny network"));
    }
    let mut state = NetState::<f64>::init(spec, seed);
    let (out, cache) = forward_train(spec, &mut state, input, 0, false)?;
    let (_, dout) = net_loss(&out, targets)?;
    let (analytic, _) = backward_range(spec, &state, &cache, &dout)?;

    let offsets = spec.param_offsets();
    let mut per_layer = Vec::new();
    let mut max_rel = 0.0f64;
    for (li, layer) in spec.layers.iter().enumerate() {
        let count = layer.param_count();
        if count == 0 {
            continue;
        }
        let mut layer_max = 0.0f64;
        for p in offsets[li]..offsets[li] + count {
            let orig = state.params[p];
            state.params[p] = orig + step;
            let (op, _) = forward_train(spec, &mut state, input, 0, false)?;
            let (lp, _) = net_loss(&op, targets)?;
            state.params[p] = orig - step;
            let (om, _) = forward_train(spec, &mut state, input, 0, false)?;
            let (lm, _) = net_loss(&om, targets)?;
            state.params[p] = orig;
            let fd = (lp - lm) / (2.0 * step);
            layer_max = layer_max.max(rel_err(analytic[p], fd));
        }
        per_layer.push((li, layer_max));
        max_rel = max_rel.max(layer_max);
    }
    Ok(GradCheckReport {
        name: String::from(name),
        n_params: spec.param_count(),
        max_rel,
        tol,
        per_layer,
    })
}

/// Gradient check of the warp: finite differences over the six raw
/// parameters of a warp-then-correlate loss.
fn warp_check() -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(97);
    let blob = |d: usize, h: usize, w: usize, centres: &[(f64, f64, f64)]| {
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0f64;
                    for &(cx, cy, cz) in centres {
                        let r2 = (x as f64 - cx) * (x as f64 - cx)
                            + (y as f64 - cy) * (y as f64 - cy)
                            + (z as f64 - cz) * (z as f64 - cz);
                        v += crate::real::f64math::exp(-r2 / 5.0);
                    }
                    data.push(v);
                }
            }
        }
        Tensor::<f64>::new(&[d, h, w], data).unwrap()
    };
    let mc: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(2.0..6.0),
                rng.gen_range(2.0..5.0),
                rng.gen_range(1.5..4.5),
            )
        })
        .collect();
    let moving = blob(7, 8, 9, &mc);
    let fixed = blob(6, 7, 8, &[(3.4, 3.1, 2.7)]);
    let dims = (6, 7, 8);
    let raw = [0.27, -0.33, 0.19, 0.13, -0.21, 0.16];
    let fill = 0.0;

    let warped = spatial_transform_3d(&moving, dims, &raw, fill)?;
    let (_, dwarped) = ncc_loss(&warped, &fixed)?;
    let analytic = spatial_transform_3d_backward(&moving, dims, &raw, fill, &dwarped)?;

    let mut max_rel = 0.0f64;
    for i in 0..6 {
        let mut rp = raw;
        rp[i] += FD_STEP;
        let mut rm = raw;
        rm[i] -= FD_STEP;
        let (lp, _) = ncc_loss(&spatial_transform_3d(&moving, dims, &rp, fill)?, &fixed)?;
        let (lm, _) = ncc_loss(&spatial_transform_3d(&moving, dims, &rm, fill)?, &fixed)?;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic[i], fd));
    }
    Ok(GradCheckReport {
        name: String::from("warp-correlate"),
        n_params: 6,
        max_rel,
        tol: 1e-3,
        per_layer: vec![],
    })
}

fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_targets(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.gen_range(2.0..50.0)).collect()
}

/// Runs the full verification suite: five small configurations covering
/// every layer kind, both losses, and the warp.
pub fn grad_check_suite() -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();

    // Slice-regression style: 2-d convs, both batchnorm flavours, max pools.
    let spec_a = NetSpec::new(vec![
        LayerSpec::Conv2 { cin: 1, cout: 2 },
        LayerSpec::BatchNorm { n: 2, spatial: true },
        LayerSpec::Elu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv2 { cin: 2, cout: 2 },
        LayerSpec::Elu,
        LayerSpec::MaxPool2,
        LayerSpec::Flatten,
        LayerSpec::Dense { nin: 8, nout: 5 },
        LayerSpec::BatchNorm { n: 5, spatial: false },
        LayerSpec::Elu,
        LayerSpec::Dense { nin: 5, nout: 2 },
    ]);
    reports.push(grad_check(
        &spec_a,
        &rand_input(&[2, 1, 6, 6], 11),
        &rand_targets(4, 12),
        13,
        "conv2-batchnorm-maxpool",
    )?);

    // Volume-regression style: prepool, 3-d convs, average pools, global pool.
    let spec_b = NetSpec::new(vec![
        LayerSpec::Prepool3 { f: (2, 2, 2) },
        LayerSpec::Conv3 { cin: 1, cout: 2 },
        LayerSpec::Elu,
        LayerSpec::AvgPool3,
        LayerSpec::Conv3 { cin: 2, cout: 2 },
        LayerSpec::Elu,
        LayerSpec::GlobalAvgPool3,
        LayerSpec::Dense { nin: 2, nout: 4 },
        LayerSpec::Elu,
        LayerSpec::Dense { nin: 4, nout: 6 },
    ]);
    reports.push(grad_check(
        &spec_b,
        &rand_input(&[1, 1, 4, 6, 6], 41),
        &rand_targets(6, 42),
        43,
        "conv3-avgpool-global",
    )?);

    // Dense stack with a tanh bottleneck and feature batchnorm.
    let spec_c = NetSpec::new(vec![
        LayerSpec::Dense { nin: 4, nout: 6 },
        LayerSpec::Tanh,
        LayerSpec::Dense { nin: 6, nout: 3 },
        LayerSpec::BatchNorm { n: 3, spatial: false },
        LayerSpec::Elu,
        LayerSpec::Dense { nin: 3, nout: 2 },
    ]);
    reports.push(grad_check(
        &spec_c,
        &rand_input(&[3, 4], 31),
        &rand_targets(6, 32),
        33,
        "dense-tanh",
    )?);

    // Warp plus correlation loss down to the six raw parameters.
    reports.push(warp_check()?);

    // Odd input extents so ceil-mode pooling hits partial windows.
    let spec_e = NetSpec::new(vec![
        LayerSpec::Conv2 { cin: 1, cout: 3 },
        LayerSpec::BatchNorm { n: 3, spatial: true },
        LayerSpec::Elu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv2 { cin: 3, cout: 2 },
        LayerSpec::Elu,
        LayerSpec::MaxPool2,
        LayerSpec::Flatten,
        LayerSpec::Dense { nin: 8, nout: 1 },
    ]);
    reports.push(grad_check(
        &spec_e,
        &rand_input(&[2, 1, 7, 7], 71),
        &rand_targets(2, 72),
        73,
        "ceil-mode-pooling",
    )?);

    Ok(reports)
}
