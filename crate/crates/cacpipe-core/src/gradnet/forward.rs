//! Forward evaluation of a network, producing the activation cache the
//! backward pass and the deconvolution feedback consume.
//!
//! Activations are tensors of the storage type; every reduction (convolution
//! taps, pooling means, batchnorm statistics, dense dot products) accumulates
//! in f64 before rounding back to storage.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{dot_rr, stencil3_into_f64, sum_mixed, sumsq_dev_mixed};
use super::spec::{LayerSpec, NetSpec};
use super::state::NetState;
use super::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::real::{f64math, Real};

/// Per-layer auxiliary data kept for backward and feedback.
#[derive(Clone, Debug)]
pub enum LayerAux {
    /// Nothing beyond the activations.
    None,
    /// Argmax switch per output element: flat index into the input plane.
    MaxPool { switches: Vec<u32> },
    /// Batch statistics actually used by the layer (batch stats in train
    /// mode, running stats in infer mode).
    BatchNorm { mean: Vec<f64>, var: Vec<f64> },
}

/// Activation cache of one forward pass over layers `from..`.
#[derive(Clone, Debug)]
pub struct Cache<R: Real> {
    /// First executed layer index.
    pub from: usize,
    /// `acts[0]` is the input; `acts[k]` the output of layer `from + k - 1`.
    pub acts: Vec<Tensor<R>>,
    /// Auxiliary data per executed layer.
    pub aux: Vec<LayerAux>,
}

impl<R: Real> Cache<R> {
    /// Output of absolute layer `idx` (must be >= `from`).
    pub fn output_of(&self, idx: usize) -> &Tensor<R> {
        &self.acts[idx + 1 - self.from]
    }

    /// Input of absolute layer `idx`.
    pub fn input_of(&self, idx: usize) -> &Tensor<R> {
        &self.acts[idx - self.from]
    }

    /// Aux entry of absolute layer `idx`.
    pub fn aux_of(&self, idx: usize) -> &LayerAux {
        &self.aux[idx - self.from]
    }
}

/// Train-mode forward from layer `from`: batchnorm uses batch statistics.
/// When `update_running` is set, running statistics absorb the batch stats
/// with momentum 0.9 (pass false for pure re-evaluation, e.g. finite
/// differences).
pub fn forward_train<R: Real>(
    spec: &NetSpec,
    state: &mut NetState<R>,
    input: &Tensor<R>,
    from: usize,
    update_running: bool,
) -> Result<(Tensor<R>, Cache<R>)> {
    let (out, cache, new_stats) = forward_impl(spec, state, input, from, true)?;
    if update_running {
        if let Some((bmean, bvar)) = new_stats {
            let offsets = spec.bn_offsets();
            for (i, layer) in spec.layers.iter().enumerate() {
                let n = layer.bn_features();
                if n == 0 || i < from {
                    continue;
                }
                let at = offsets[i];
                for f in 0..n {
                    state.bn_mean[at + f] = 0.9 * state.bn_mean[at + f] + 0.1 * bmean[at + f];
                    state.bn_var[at + f] = 0.9 * state.bn_var[at + f] + 0.1 * bvar[at + f];
                }
            }
        }
    }
    Ok((out, cache))
}

/// Infer-mode forward from layer `from`: batchnorm uses running statistics;
/// the state is untouched.
pub fn forward_infer<R: Real>(
    spec: &NetSpec,
    state: &NetState<R>,
    input: &Tensor<R>,
    from: usize,
) -> Result<(Tensor<R>, Cache<R>)> {
    let (out, cache, _) = forward_impl(spec, state, input, from, false)?;
    Ok((out, cache))
}

/// Shared forward walk. In train mode returns the batch statistics packed
/// into full-length running-stat vectors for the caller to fold in.
#[allow(clippy::type_complexity)]
fn forward_impl<R: Real>(
    spec: &NetSpec,
    state: &NetState<R>,
    input: &Tensor<R>,
    from: usize,
    train: bool,
) -> Result<(Tensor<R>, Cache<R>, Option<(Vec<f64>, Vec<f64>)>)> {
    if from > spec.layers.len() {
        return Err(CoreError::invalid("start layer out of range"));
    }
    let param_offsets = spec.param_offsets();
    let bn_offsets = spec.bn_offsets();
    let mut acts: Vec<Tensor<R>> = vec![input.clone()];
    let mut aux: Vec<LayerAux> = Vec::new();
    let mut batch_stats: Option<(Vec<f64>, Vec<f64>)> = if train && spec.bn_feature_count() > 0 {
        Some((
            vec![0.0; spec.bn_feature_count()],
            vec![0.0; spec.bn_feature_count()],
        ))
    } else {
        None
    };

    for (i, layer) in spec.layers.iter().enumerate().skip(from) {
        let x = acts.last().unwrap();
        let params = &state.params[param_offsets[i]..param_offsets[i] + layer.param_count()];
        let (y, a) = match *layer {
            LayerSpec::Prepool3 { f } => (avg_pool3(x, f)?, LayerAux::None),
            LayerSpec::AvgPool3 => (avg_pool3(x, (2, 2, 2))?, LayerAux::None),
            LayerSpec::Conv3 { cin, cout } => (conv3(x, params, cin, cout)?, LayerAux::None),
            LayerSpec::Conv2 { cin, cout } => (conv2(x, params, cin, cout)?, LayerAux::None),
            LayerSpec::MaxPool2 => {
                let (y, switches) = max_pool2(x)?;
                (y, LayerAux::MaxPool { switches })
            }
            LayerSpec::GlobalAvgPool3 => (global_avg_pool3(x)?, LayerAux::None),
            LayerSpec::Flatten => (flatten(x)?, LayerAux::None),
            LayerSpec::Dense { nin, nout } => (dense(x, params, nin, nout)?, LayerAux::None),
            LayerSpec::BatchNorm { n, spatial } => {
                let at = bn_offsets[i];
                let (mean, var) = if train {
                    let (m, v) = batch_stats_of(x, n, spatial)?;
                    if let Some((bm, bv)) = batch_stats.as_mut() {
                        bm[at..at + n].copy_from_slice(&m);
                        bv[at..at + n].copy_from_slice(&v);
                    }
                    (m, v)
                } else {
                    (
                        state.bn_mean[at..at + n].to_vec(),
                        state.bn_var[at..at + n].to_vec(),
                    )
                };
                let y = batch_norm(x, params, &mean, &var, n, spatial)?;
                (y, LayerAux::BatchNorm { mean, var })
            }
            LayerSpec::Elu => (elementwise(x, elu), LayerAux::None),
            LayerSpec::Tanh => (elementwise(x, R::tanh), LayerAux::None),
        };
        acts.push(y);
        aux.push(a);
    }

    let out = acts.last().unwrap().clone();
    if !train {
        batch_stats = None;
    }
    Ok((out, Cache { from, acts, aux }, batch_stats))
}

fn elu<R: Real>(x: R) -> R {
    if x > R::ZERO {
        x
    } else {
        x.exp() - R::ONE
    }
}

fn elementwise<R: Real>(x: &Tensor<R>, f: impl Fn(R) -> R) -> Tensor<R> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn expect_dims<R: Real>(x: &Tensor<R>, n: usize, what: &str) -> Result<()> {
    if x.shape.len() != n {
        return Err(CoreError::invalid(alloc::format!(
            "{what} expects a {n}-d tensor, got {} dims",
            x.shape.len()
        )));
    }
    Ok(())
}

/// Ceil-mode average pooling over the three spatial dims of [n, c, d, h, w]
/// by integer factors (fd, fh, fw); border windows average their actual
/// extent.
fn avg_pool3<R: Real>(x: &Tensor<R>, f: (usize, usize, usize)) -> Result<Tensor<R>> {
    expect_dims(x, 5, "3-d average pooling")?;
    let (fd, fh, fw) = f;
    if fd == 0 || fh == 0 || fw == 0 {
        return Err(CoreError::invalid("pool factors must be nonzero"));
    }
    let (n, c, d, h, w) = (
        x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4],
    );
    let (od, oh, ow) = (d.div_ceil(fd), h.div_ceil(fh), w.div_ceil(fw));
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    let ivol = d * h * w;
    let ovol = od * oh * ow;
    let mut acc = vec![0.0f64; ow];
    for nc in 0..n * c {
        let src = &x.data[nc * ivol..(nc + 1) * ivol];
        let dst = &mut out.data[nc * ovol..(nc + 1) * ovol];
        for bz in 0..od {
            let z1 = ((bz + 1) * fd).min(d);
            for by in 0..oh {
                let y1 = ((by + 1) * fh).min(h);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for z in bz * fd..z1 {
                    for y in by * fh..y1 {
                        let row = &src[(z * h + y) * w..(z * h + y) * w + w];
                        for (a, blk) in acc.iter_mut().zip(row.chunks(fw)) {
                            for v in blk {
                                *a += v.to_f64();
                            }
                        }
                    }
                }
                let rows = ((z1 - bz * fd) * (y1 - by * fh)) as f64;
                let orow = &mut dst[(bz * oh + by) * ow..(bz * oh + by) * ow + ow];
                for (bx, (o, a)) in orow.iter_mut().zip(acc.iter()).enumerate() {
                    let x1 = ((bx + 1) * fw).min(w);
                    let count = rows * (x1 - bx * fw) as f64;
                    *o = R::from_f64(*a / count);
                }
            }
        }
    }
    Ok(out)
}

/// 3x3x3 same-padding convolution on [n, cin, d, h, w].
fn conv3<R: Real>(x: &Tensor<R>, params: &[R], cin: usize, cout: usize) -> Result<Tensor<R>> {
    expect_dims(x, 5, "3-d convolution")?;
    if x.shape[1] != cin {
        return Err(CoreError::invalid("convolution channel mismatch"));
    }
    let (n, d, h, w) = (x.shape[0], x.shape[2], x.shape[3], x.shape[4]);
    let vol = d * h * w;
    let weights = &params[..cout * cin * 27];
    let biases = &params[cout * cin * 27..];
    let mut out = Tensor::zeros(&[n, cout, d, h, w]);
    let mut acc = vec![0.0f64; vol];
    // One widening pass per sample keeps the tap loops free of conversions.
    let mut xf = vec![0.0f64; cin * vol];
    for ni in 0..n {
        let xs = &x.data[ni * cin * vol..(ni + 1) * cin * vol];
        for (dst, src) in xf.iter_mut().zip(xs.iter()) {
            *dst = src.to_f64();
        }
        for co in 0..cout {
            acc.iter_mut().for_each(|a| *a = biases[co].to_f64());
            for ci in 0..cin {
                let src = &xf[ci * vol..(ci + 1) * vol];
                let wbase = (co * cin + ci) * 27;
                for kz in 0..3usize {
                    let dz = kz as i64 - 1;
                    let z0 = (-dz).max(0) as usize;
                    let z1 = (d as i64 - dz.max(0)) as usize;
                    for ky in 0..3usize {
                        let dy = ky as i64 - 1;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as i64 - dy.max(0)) as usize;
                        let t = wbase + (kz * 3 + ky) * 3;
                        let (w0, w1, w2) = (
                            weights[t].to_f64(),
                            weights[t + 1].to_f64(),
                            weights[t + 2].to_f64(),
                        );
                        for z in z0..z1 {
                            let sz = (z as i64 + dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as i64 + dy) as usize;
                                let srow = (sz * h + sy) * w;
                                let arow = (z * h + y) * w;
                                stencil3_into_f64(
                                    &mut acc[arow..arow + w],
                                    &src[srow..srow + w],
                                    w0,
                                    w1,
                                    w2,
                                );
                            }
                        }
                    }
                }
            }
            let dst = &mut out.data[(ni * cout + co) * vol..(ni * cout + co + 1) * vol];
            for (o, a) in dst.iter_mut().zip(acc.iter()) {
                *o = R::from_f64(*a);
            }
        }
    }
    Ok(out)
}

/// 3x3 same-padding convolution on [n, cin, h, w].
fn conv2<R: Real>(x: &Tensor<R>, params: &[R], cin: usize, cout: usize) -> Result<Tensor<R>> {
    expect_dims(x, 4, "2-d convolution")?;
    if x.shape[1] != cin {
        return Err(CoreError::invalid("convolution channel mismatch"));
    }
    let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
    let plane = h * w;
    let weights = &params[..cout * cin * 9];
    let biases = &params[cout * cin * 9..];
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let mut acc = vec![0.0f64; plane];
    // One widening pass per sample keeps the tap loops free of conversions.
    let mut xf = vec![0.0f64; cin * plane];
    for ni in 0..n {
        let xs = &x.data[ni * cin * plane..(ni + 1) * cin * plane];
        for (dst, src) in xf.iter_mut().zip(xs.iter()) {
            *dst = src.to_f64();
        }
        for co in 0..cout {
            acc.iter_mut().for_each(|a| *a = biases[co].to_f64());
            for ci in 0..cin {
                let src = &xf[ci * plane..(ci + 1) * plane];
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    let dy = ky as i64 - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as i64 - dy.max(0)) as usize;
                    let (w0, w1, w2) = (
                        weights[wbase + ky * 3].to_f64(),
                        weights[wbase + ky * 3 + 1].to_f64(),
                        weights[wbase + ky * 3 + 2].to_f64(),
                    );
                    for y in y0..y1 {
                        let sy = (y as i64 + dy) as usize;
                        stencil3_into_f64(
                            &mut acc[y * w..y * w + w],
                            &src[sy * w..sy * w + w],
                            w0,
                            w1,
                            w2,
                        );
                    }
                }
            }
            let dst = &mut out.data[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
            for (o, a) in dst.iter_mut().zip(acc.iter()) {
                *o = R::from_f64(*a);
            }
        }
    }
    Ok(out)
}

/// 2x2 stride-2 ceil-mode max pooling on [n, c, h, w]; ties break toward
/// scan order. Switches are flat indices into the input plane.
fn max_pool2<R: Real>(x: &Tensor<R>) -> Result<(Tensor<R>, Vec<u32>)> {
    expect_dims(x, 4, "max pooling")?;
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if h * w > u32::MAX as usize {
        return Err(CoreError::invalid("plane too large for pool switches"));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let plane = h * w;
    let oplane = oh * ow;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut switches = vec![0u32; n * c * oplane];
    for nc in 0..n * c {
        let src = &x.data[nc * plane..(nc + 1) * plane];
        let dst = &mut out.data[nc * oplane..(nc + 1) * oplane];
        let sw = &mut switches[nc * oplane..(nc + 1) * oplane];
        for by in 0..oh {
            let r0 = by * 2;
            let two_rows = r0 + 1 < h;
            let row0 = &src[r0 * w..r0 * w + w];
            // With a single row the duplicate candidates never win a
            // strictly-greater comparison, so aliasing keeps one code path.
            let row1 = if two_rows {
                &src[(r0 + 1) * w..(r0 + 1) * w + w]
            } else {
                row0
            };
            let orow = &mut dst[by * ow..by * ow + w / 2];
            let srow = &mut sw[by * ow..by * ow + w / 2];
            for (bx, ((p0, p1), (o, s))) in row0
                .chunks_exact(2)
                .zip(row1.chunks_exact(2))
                .zip(orow.iter_mut().zip(srow.iter_mut()))
                .enumerate()
            {
                let c0 = bx * 2;
                let mut best = p0[0];
                let mut at = r0 * w + c0;
                if p0[1] > best {
                    best = p0[1];
                    at = r0 * w + c0 + 1;
                }
                if p1[0] > best {
                    best = p1[0];
                    at = (r0 + 1) * w + c0;
                }
                if p1[1] > best {
                    best = p1[1];
                    at = (r0 + 1) * w + c0 + 1;
                }
                *o = best;
                *s = at as u32;
            }
            if w % 2 == 1 {
                let mut best = row0[w - 1];
                let mut at = r0 * w + w - 1;
                if row1[w - 1] > best {
                    best = row1[w - 1];
                    at = (r0 + 1) * w + w - 1;
                }
                dst[by * ow + ow - 1] = best;
                sw[by * ow + ow - 1] = at as u32;
            }
        }
    }
    Ok((out, switches))
}

/// Mean over the spatial dims of [n, c, d, h, w] -> [n, c].
fn global_avg_pool3<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    expect_dims(x, 5, "global average pooling")?;
    let (n, c) = (x.shape[0], x.shape[1]);
    let vol: usize = x.shape[2] * x.shape[3] * x.shape[4];
    if vol == 0 {
        return Err(CoreError::invalid("global pooling over empty volume"));
    }
    let mut out = Tensor::zeros(&[n, c]);
    for nc in 0..n * c {
        let acc = sum_mixed(&x.data[nc * vol..(nc + 1) * vol]);
        out.data[nc] = R::from_f64(acc / vol as f64);
    }
    Ok(out)
}

/// [n, c, h, w] -> [n, c*h*w].
fn flatten<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    expect_dims(x, 4, "flatten")?;
    let n = x.shape[0];
    let f: usize = x.shape[1] * x.shape[2] * x.shape[3];
    Tensor::new(&[n, f], x.data.clone())
}

/// Fully connected layer on [n, nin] -> [n, nout].
fn dense<R: Real>(x: &Tensor<R>, params: &[R], nin: usize, nout: usize) -> Result<Tensor<R>> {
    expect_dims(x, 2, "dense layer")?;
    if x.shape[1] != nin {
        return Err(CoreError::invalid("dense input width mismatch"));
    }
    let n = x.shape[0];
    let weights = &params[..nout * nin];
    let biases = &params[nout * nin..];
    let mut out = Tensor::zeros(&[n, nout]);
    for ni in 0..n {
        let xs = &x.data[ni * nin..(ni + 1) * nin];
        for o in 0..nout {
            let ws = &weights[o * nin..(o + 1) * nin];
            let acc = biases[o].to_f64() + dot_rr(ws, xs);
            out.data[ni * nout + o] = R::from_f64(acc);
        }
    }
    Ok(out)
}

/// Batch statistics (mean, biased variance) per feature.
fn batch_stats_of<R: Real>(x: &Tensor<R>, n_feat: usize, spatial: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let (count, stride, plane) = bn_geometry(x, n_feat, spatial)?;
    let n = x.data.len() / stride;
    let mut mean = vec![0.0f64; n_feat];
    let mut var = vec![0.0f64; n_feat];
    for f in 0..n_feat {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let base = ni * stride + f * plane;
            acc += sum_mixed(&x.data[base..base + plane]);
        }
        let m = acc / count as f64;
        let mut vacc = 0.0f64;
        for ni in 0..n {
            let base = ni * stride + f * plane;
            vacc += sumsq_dev_mixed(&x.data[base..base + plane], m);
        }
        mean[f] = m;
        var[f] = vacc / count as f64;
    }
    Ok((mean, var))
}

/// Geometry of batchnorm iteration: total count per feature, the sample
/// stride, and the per-feature plane size (1 for feature-wise norm).
fn bn_geometry<R: Real>(x: &Tensor<R>, n_feat: usize, spatial: bool) -> Result<(usize, usize, usize)> {
    if spatial {
        expect_dims(x, 4, "spatial batchnorm")?;
        if x.shape[1] != n_feat {
            return Err(CoreError::invalid("batchnorm channel mismatch"));
        }
        let plane = x.shape[2] * x.shape[3];
        Ok((x.shape[0] * plane, n_feat * plane, plane))
    } else {
        expect_dims(x, 2, "batchnorm")?;
        if x.shape[1] != n_feat {
            return Err(CoreError::invalid("batchnorm feature mismatch"));
        }
        Ok((x.shape[0], n_feat, 1))
    }
}

/// Batchnorm epsilon.
pub(super) const BN_EPS: f64 = 1e-5;

fn batch_norm<R: Real>(
    x: &Tensor<R>,
    params: &[R],
    mean: &[f64],
    var: &[f64],
    n_feat: usize,
    spatial: bool,
) -> Result<Tensor<R>> {
    let (_, stride, plane) = bn_geometry(x, n_feat, spatial)?;
    let gamma = &params[..n_feat];
    let beta = &params[n_feat..];
    let mut out = Tensor::zeros(&x.shape);
    let n = x.data.len() / stride;
    for f in 0..n_feat {
        let inv = 1.0 / f64math::sqrt(var[f] + BN_EPS);
        let m = mean[f];
        let g = gamma[f].to_f64();
        let b = beta[f].to_f64();
        for ni in 0..n {
            let base = ni * stride + f * plane;
            let xin = &x.data[base..base + plane];
            let yout = &mut out.data[base..base + plane];
            for (o, v) in yout.iter_mut().zip(xin.iter()) {
                let xh = (v.to_f64() - m) * inv;
                *o = R::from_f64(g * xh + b);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::spec::{LayerSpec, NetSpec};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let spec = NetSpec::new(vec![
            LayerSpec::Conv2 { cin: 1, cout: 2 },
            LayerSpec::Elu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { nin: 2 * 3 * 3, nout: 4 },
        ]);
        let mut state = NetState::<f32>::init(&spec, 3);
        for p in state.params.iter_mut() {
            *p = 0.0;
        }
        let x = rand_tensor(&[2, 1, 5, 5], 10);
        let (y, _) = forward_infer(&spec, &state, &x, 0).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_passes_input_through() {
        let spec = NetSpec::new(vec![LayerSpec::Conv2 { cin: 1, cout: 1 }]);
        let mut state = NetState::<f32>::init(&spec, 0);
        for p in state.params.iter_mut() {
            *p = 0.0;
        }
        // Centre tap of the 3x3 kernel.
        state.params[4] = 1.0;
        let x = rand_tensor(&[1, 1, 6, 7], 4);
        let (y, _) = forward_infer(&spec, &state, &x, 0).unwrap();
        for (a, b) in y.data.iter().zip(x.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2_matches_naive_oracle() {
        let cin = 3;
        let cout = 2;
        let (h, w) = (5, 6);
        let x = rand_tensor(&[2, cin, h, w], 21);
        let spec = NetSpec::new(vec![LayerSpec::Conv2 { cin, cout }]);
        let state = NetState::<f32>::init(&spec, 9);
        let (y, _) = forward_infer(&spec, &state, &x, 0).unwrap();
        let weights = &state.params[..cout * cin * 9];
        let biases = &state.params[cout * cin * 9..];
        for n in 0..2 {
            for co in 0..cout {
                for yy in 0..h as i64 {
                    for xx in 0..w as i64 {
                        let mut acc = biases[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let sy = yy + ky - 1;
                                    let sx = xx + kx - 1;
                                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                        continue;
                                    }
                                    let xv = x.data
                                        [((n * cin + ci) * h + sy as usize) * w + sx as usize];
                                    let wv = weights
                                        [(co * cin + ci) * 9 + (ky * 3 + kx) as usize];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        let got =
                            y.data[((n * cout + co) * h + yy as usize) * w + xx as usize] as f64;
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv3_matches_naive_oracle() {
        let cin = 2;
        let cout = 2;
        let (d, h, w) = (3, 4, 5);
        let x = rand_tensor(&[1, cin, d, h, w], 33);
        let spec = NetSpec::new(vec![LayerSpec::Conv3 { cin, cout }]);
        let state = NetState::<f32>::init(&spec, 5);
        let (y, _) = forward_infer(&spec, &state, &x, 0).unwrap();
        let weights = &state.params[..cout * cin * 27];
        let biases = &state.params[cout * cin * 27..];
        for co in 0..cout {
            for zz in 0..d as i64 {
                for yy in 0..h as i64 {
                    for xx in 0..w as i64 {
                        let mut acc = biases[co] as f64;
                        for ci in 0..cin {
                            for kz in 0..3i64 {
                                for ky in 0..3i64 {
                                    for kx in 0..3i64 {
                                        let (sz, sy, sx) = (zz + kz - 1, yy + ky - 1, xx + kx - 1);
                                        if sz < 0
                                            || sy < 0
                                            || sx < 0
                                            || sz >= d as i64
                                            || sy >= h as i64
                                            || sx >= w as i64
                                        {
                                            continue;
                                        }
                                        let xv = x.data[((ci * d + sz as usize) * h
                                            + sy as usize)
                                            * w
                                            + sx as usize];
                                        let wv = weights[(co * cin + ci) * 27
                                            + ((kz * 9) + ky * 3 + kx) as usize];
                                        acc += xv as f64 * wv as f64;
                                    }
                                }
                            }
                        }
                        let got = y.data
                            [((co * d + zz as usize) * h + yy as usize) * w + xx as usize]
                            as f64;
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_switches_point_at_argmax() {
        let x = Tensor::<f32>::new(
            &[1, 1, 3, 3],
            vec![
                1.0, 5.0, 2.0, //
                0.0, 3.0, 9.0, //
                4.0, 4.0, 7.0,
            ],
        )
        .unwrap();
        let (y, sw) = max_pool2(&x).unwrap();
        assert_eq!(y.shape, vec![1, 1, 2, 2]);
        assert_eq!(y.data, vec![5.0, 9.0, 4.0, 7.0]);
        assert_eq!(sw, vec![1, 5, 6, 8]);
    }

    #[test]
    fn pooling_dims_follow_ceil_mode() {
        let x = rand_tensor(&[1, 1, 7, 7], 2);
        let (y, _) = max_pool2(&x).unwrap();
        assert_eq!(y.shape, vec![1, 1, 4, 4]);
        let x3 = rand_tensor(&[1, 1, 5, 7, 9], 2);
        let y3 = avg_pool3(&x3, (2, 2, 2)).unwrap();
        assert_eq!(y3.shape, vec![1, 1, 3, 4, 5]);
    }

    #[test]
    fn prepool_matches_volume_downsample() {
        use crate::volgrid::{avg_pool_downsample, Volume};
        let mut rng = crate::rng::rng_from_seed(7);
        let dims = (13, 11, 5);
        let voxels: Vec<i16> = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.gen_range(-1000..2000))
            .collect();
        let vol = Volume::new(dims, (1.0, 1.0), 3.0, 3.0, voxels).unwrap();
        let ds = avg_pool_downsample(&vol, (6, 6, 2)).unwrap();
        // Same pooling through the network layer: tensor is [n, c, z, y, x].
        let data: Vec<f64> = vol.voxels().iter().map(|&v| v as f64).collect();
        let t = Tensor::<f64>::new(&[1, 1, dims.2, dims.1, dims.0], data).unwrap();
        let pooled = avg_pool3(&t, (2, 6, 6)).unwrap();
        let (ox, oy, oz) = ds.dims();
        assert_eq!(pooled.shape, vec![1, 1, oz, oy, ox]);
        for (a, b) in pooled.data.iter().zip(ds.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn global_avg_pool_means() {
        let x = Tensor::<f32>::new(&[1, 2, 1, 1, 3], vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0])
            .unwrap();
        let y = global_avg_pool3(&x).unwrap();
        assert_eq!(y.shape, vec![1, 2]);
        assert!((y.data[0] - 2.0).abs() < 1e-6);
        assert!((y.data[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn bn_train_infer_agree_when_running_equals_batch() {
        let spec = NetSpec::new(vec![LayerSpec::BatchNorm {
            n: 3,
            spatial: true,
        }]);
        let mut state = NetState::<f32>::init(&spec, 2);
        // Non-trivial scale/shift.
        state.params[0] = 1.5;
        state.params[4] = -0.25;
        let x = rand_tensor(&[4, 3, 5, 5], 12);
        let (train_out, cache) = forward_train(&spec, &mut state, &x, 0, false).unwrap();
        // Copy the batch stats into the running stats.
        if let LayerAux::BatchNorm { mean, var } = cache.aux_of(0) {
            state.bn_mean.copy_from_slice(mean);
            state.bn_var.copy_from_slice(var);
        }
        let (infer_out, _) = forward_infer(&spec, &state, &x, 0).unwrap();
        for (a, b) in train_out.data.iter().zip(infer_out.data.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bn_normalizes_batch() {
        let spec = NetSpec::new(vec![LayerSpec::BatchNorm {
            n: 2,
            spatial: false,
        }]);
        let mut state = NetState::<f64>::init(&spec, 2);
        let x = Tensor::<f64>::new(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let (y, _) = forward_train(&spec, &mut state, &x, 0, false).unwrap();
        // Each feature column has mean 0 and unit variance (up to eps).
        for f in 0..2 {
            let col: Vec<f64> = (0..3).map(|n| y.data[n * 2 + f]).collect();
            let m: f64 = col.iter().sum::<f64>() / 3.0;
            let v: f64 = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let spec = NetSpec::new(vec![LayerSpec::BatchNorm {
            n: 1,
            spatial: false,
        }]);
        let mut state = NetState::<f64>::init(&spec, 2);
        let x = Tensor::<f64>::new(&[2, 1], vec![4.0, 8.0]).unwrap();
        // Batch mean 6, biased variance 4.
        forward_train(&spec, &mut state, &x, 0, true).unwrap();
        assert!((state.bn_mean[0] - 0.6).abs() < 1e-12);
        assert!((state.bn_var[0] - (0.9 + 0.4)).abs() < 1e-12);
        forward_train(&spec, &mut state, &x, 0, false).unwrap();
        assert!((state.bn_mean[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn infer_is_repeatable() {
        let spec = NetSpec::scoring(1).unwrap();
        let state = NetState::<f32>::init(&spec, 40);
        let x = rand_tensor(&[1, 1, 224, 224], 41);
        let (a, _) = forward_infer(&spec, &state, &x, 0).unwrap();
        let (b, _) = forward_infer(&spec, &state, &x, 0).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape, vec![1, 1]);
    }

    #[test]
    fn registration_net_shapes_flow() {
        let spec = NetSpec::registration(1).unwrap();
        let state = NetState::<f32>::init(&spec, 13);
        let x = rand_tensor(&[1, 1, 20, 160, 160], 3);
        let (y, cache) = forward_infer(&spec, &state, &x, 0).unwrap();
        assert_eq!(y.shape, vec![1, 6]);
        // Prepool with factors (1, 6, 6) gives ceil dims.
        assert_eq!(cache.output_of(0).shape, vec![1, 1, 20, 27, 27]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let spec = NetSpec::scoring(1).unwrap();
        let state = NetState::<f32>::init(&spec, 1);
        let x = rand_tensor(&[1, 2, 224, 224], 3);
        assert!(forward_infer(&spec, &state, &x, 0).is_err());
    }
}
