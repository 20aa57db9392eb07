//! Reverse-mode differentiation over a cached forward pass.
//!
//! Gradients are computed and returned entirely in f64 regardless of the
//! storage type. Batchnorm layers are differentiated through their batch
//! statistics, matching a train-mode forward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::forward::{Cache, LayerAux, BN_EPS};
use super::kernels::{axpy_into_f64, dot3_mixed, stencil3_into_f64, sum_and_cdot_mixed, sum_f64};
use super::spec::{LayerSpec, NetSpec};
use super::state::NetState;
use super::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::real::{f64math, Real};

/// Backpropagate `dout` through the layers covered by `cache`.
///
/// Returns the gradient of every network parameter (entries for layers
/// outside the cached range stay zero) and the gradient with respect to the
/// cached input tensor.
pub fn backward_range<R: Real>(
    spec: &NetSpec,
    state: &NetState<R>,
    cache: &Cache<R>,
    dout: &Tensor<f64>,
) -> Result<(Vec<f64>, Tensor<f64>)> {
    let last = cache.output_of(spec.layers.len() - 1);
    if dout.shape != last.shape {
        return Err(CoreError::invalid("output gradient shape mismatch"));
    }
    let offsets = spec.param_offsets();
    let mut grads = vec![0.0f64; spec.param_count()];
    let mut dy = dout.clone();
    for i in (cache.from..spec.layers.len()).rev() {
        let layer = &spec.layers[i];
        let x = cache.input_of(i);
        let params = &state.params[offsets[i]..offsets[i] + layer.param_count()];
        let pgrads = &mut grads[offsets[i]..offsets[i] + layer.param_count()];
        dy = match *layer {
            LayerSpec::Prepool3 { f } => avg_pool3_back(x, &dy, f)?,
            LayerSpec::AvgPool3 => avg_pool3_back(x, &dy, (2, 2, 2))?,
            LayerSpec::Conv3 { cin, cout } => conv3_back(x, &dy, params, pgrads, cin, cout)?,
            LayerSpec::Conv2 { cin, cout } => conv2_back(x, &dy, params, pgrads, cin, cout)?,
            LayerSpec::MaxPool2 => {
                let LayerAux::MaxPool { switches } = cache.aux_of(i) else {
                    return Err(CoreError::invalid("missing pooling switches"));
                };
                max_pool2_back(x, &dy, switches)?
            }
            LayerSpec::GlobalAvgPool3 => gap3_back(x, &dy)?,
            LayerSpec::Flatten => Tensor {
                shape: x.shape.clone(),
                data: dy.data,
            },
            LayerSpec::Dense { nin, nout } => dense_back(x, &dy, params, pgrads, nin, nout)?,
            LayerSpec::BatchNorm { n, spatial } => {
                let LayerAux::BatchNorm { mean, var } = cache.aux_of(i) else {
                    return Err(CoreError::invalid("missing batchnorm statistics"));
                };
                bn_back(x, dy, params, pgrads, mean, var, n, spatial)?
            }
            LayerSpec::Elu => {
                // For x <= 0 the output is e^x - 1, so the slope is y + 1.
                let y = cache.output_of(i);
                let mut dx = dy;
                for (g, yv) in dx.data.iter_mut().zip(y.data.iter()) {
                    let yv = yv.to_f64();
                    if yv <= 0.0 {
                        *g *= yv + 1.0;
                    }
                }
                dx
            }
            LayerSpec::Tanh => {
                let y = cache.output_of(i);
                let mut dx = dy;
                for (g, yv) in dx.data.iter_mut().zip(y.data.iter()) {
                    let yv = yv.to_f64();
                    *g *= 1.0 - yv * yv;
                }
                dx
            }
        };
    }
    Ok((grads, dy))
}

fn avg_pool3_back<R: Real>(
    x: &Tensor<R>,
    dy: &Tensor<f64>,
    f: (usize, usize, usize),
) -> Result<Tensor<f64>> {
    let (fd, fh, fw) = f;
    let (n, c, d, h, w) = (
        x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4],
    );
    let (od, oh, ow) = (d.div_ceil(fd), h.div_ceil(fh), w.div_ceil(fw));
    let ivol = d * h * w;
    let ovol = od * oh * ow;
    let mut dx = Tensor::zeros(&x.shape);
    for nc in 0..n * c {
        let src = &dy.data[nc * ovol..(nc + 1) * ovol];
        let dst = &mut dx.data[nc * ivol..(nc + 1) * ivol];
        for bz in 0..od {
            let z1 = ((bz + 1) * fd).min(d);
            for by in 0..oh {
                let y1 = ((by + 1) * fh).min(h);
                for bx in 0..ow {
                    let x1 = ((bx + 1) * fw).min(w);
                    let count = (z1 - bz * fd) * (y1 - by * fh) * (x1 - bx * fw);
                    let g = src[(bz * oh + by) * ow + bx] / count as f64;
                    for z in bz * fd..z1 {
                        for y in by * fh..y1 {
                            for xi in bx * fw..x1 {
                                dst[(z * h + y) * w + xi] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn conv3_back<R: Real>(
    x: &Tensor<R>,
    dy: &Tensor<f64>,
    params: &[R],
    pgrads: &mut [f64],
    cin: usize,
    cout: usize,
) -> Result<Tensor<f64>> {
    let (n, d, h, w) = (x.shape[0], x.shape[2], x.shape[3], x.shape[4]);
    let vol = d * h * w;
    let weights = &params[..cout * cin * 27];
    let (wgrads, bgrads) = pgrads.split_at_mut(cout * cin * 27);
    let mut dx = Tensor::zeros(&x.shape);
    // One widening pass per sample keeps the tap loops free of conversions.
    let mut xf = vec![0.0f64; cin * vol];
    for ni in 0..n {
        let xsall = &x.data[ni * cin * vol..(ni + 1) * cin * vol];
        for (dst, src) in xf.iter_mut().zip(xsall.iter()) {
            *dst = src.to_f64();
        }
        for co in 0..cout {
            let dys = &dy.data[(ni * cout + co) * vol..(ni * cout + co + 1) * vol];
            bgrads[co] += sum_f64(dys);
            for ci in 0..cin {
                let xs = &xf[ci * vol..(ci + 1) * vol];
                let dxs = &mut dx.data[(ni * cin + ci) * vol..(ni * cin + ci + 1) * vol];
                let wbase = (co * cin + ci) * 27;
                for kz in 0..3usize {
                    let dz = kz as i64 - 1;
                    let z0 = (-dz).max(0) as usize;
                    let z1 = (d as i64 - dz.max(0)) as usize;
                    for ky in 0..3usize {
                        let dyo = ky as i64 - 1;
                        let y0 = (-dyo).max(0) as usize;
                        let y1 = (h as i64 - dyo.max(0)) as usize;
                        let t = wbase + (kz * 3 + ky) * 3;
                        let (w0, w1, w2) = (
                            weights[t].to_f64(),
                            weights[t + 1].to_f64(),
                            weights[t + 2].to_f64(),
                        );
                        let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
                        for z in z0..z1 {
                            let sz = (z as i64 + dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as i64 + dyo) as usize;
                                let g = &dys[(z * h + y) * w..(z * h + y) * w + w];
                                let srow = (sz * h + sy) * w;
                                let (d0, d1, d2) = dot3_mixed(g, &xs[srow..srow + w]);
                                a0 += d0;
                                a1 += d1;
                                a2 += d2;
                                stencil3_into_f64(&mut dxs[srow..srow + w], g, w2, w1, w0);
                            }
                        }
                        wgrads[t] += a0;
                        wgrads[t + 1] += a1;
                        wgrads[t + 2] += a2;
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn conv2_back<R: Real>(
    x: &Tensor<R>,
    dy: &Tensor<f64>,
    params: &[R],
    pgrads: &mut [f64],
    cin: usize,
    cout: usize,
) -> Result<Tensor<f64>> {
    let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
    let plane = h * w;
    let weights = &params[..cout * cin * 9];
    let (wgrads, bgrads) = pgrads.split_at_mut(cout * cin * 9);
    let mut dx = Tensor::zeros(&x.shape);
    // One widening pass per sample keeps the tap loops free of conversions.
    let mut xf = vec![0.0f64; cin * plane];
    for ni in 0..n {
        let xsall = &x.data[ni * cin * plane..(ni + 1) * cin * plane];
        for (dst, src) in xf.iter_mut().zip(xsall.iter()) {
            *dst = src.to_f64();
        }
        for co in 0..cout {
            let dys = &dy.data[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
            bgrads[co] += sum_f64(dys);
            for ci in 0..cin {
                let xs = &xf[ci * plane..(ci + 1) * plane];
                let dxs = &mut dx.data[(ni * cin + ci) * plane..(ni * cin + ci + 1) * plane];
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    let dyo = ky as i64 - 1;
                    let y0 = (-dyo).max(0) as usize;
                    let y1 = (h as i64 - dyo.max(0)) as usize;
                    let (w0, w1, w2) = (
                        weights[wbase + ky * 3].to_f64(),
                        weights[wbase + ky * 3 + 1].to_f64(),
                        weights[wbase + ky * 3 + 2].to_f64(),
                    );
                    let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
                    for y in y0..y1 {
                        let sy = (y as i64 + dyo) as usize;
                        let g = &dys[y * w..y * w + w];
                        let (d0, d1, d2) = dot3_mixed(g, &xs[sy * w..sy * w + w]);
                        a0 += d0;
                        a1 += d1;
                        a2 += d2;
                        stencil3_into_f64(&mut dxs[sy * w..sy * w + w], g, w2, w1, w0);
                    }
                    wgrads[wbase + ky * 3] += a0;
                    wgrads[wbase + ky * 3 + 1] += a1;
                    wgrads[wbase + ky * 3 + 2] += a2;
                }
            }
        }
    }
    Ok(dx)
}

fn max_pool2_back<R: Real>(
    x: &Tensor<R>,
    dy: &Tensor<f64>,
    switches: &[u32],
) -> Result<Tensor<f64>> {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let plane = h * w;
    let oplane = h.div_ceil(2) * w.div_ceil(2);
    if switches.len() != n * c * oplane {
        return Err(CoreError::invalid("pooling switch count mismatch"));
    }
    let mut dx = Tensor::zeros(&x.shape);
    for nc in 0..n * c {
        let src = &dy.data[nc * oplane..(nc + 1) * oplane];
        let sw = &switches[nc * oplane..(nc + 1) * oplane];
        let dst = &mut dx.data[nc * plane..(nc + 1) * plane];
        for (g, &at) in src.iter().zip(sw.iter()) {
            dst[at as usize] += *g;
        }
    }
    Ok(dx)
}

fn gap3_back<R: Real>(x: &Tensor<R>, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, c) = (x.shape[0], x.shape[1]);
    let vol = x.shape[2] * x.shape[3] * x.shape[4];
    let mut dx = Tensor::zeros(&x.shape);
    for nc in 0..n * c {
        let g = dy.data[nc] / vol as f64;
        for v in &mut dx.data[nc * vol..(nc + 1) * vol] {
            *v = g;
        }
    }
    Ok(dx)
}

fn dense_back<R: Real>(
    x: &Tensor<R>,
    dy: &Tensor<f64>,
    params: &[R],
    pgrads: &mut [f64],
    nin: usize,
    nout: usize,
) -> Result<Tensor<f64>> {
    let n = x.shape[0];
    let weights = &params[..nout * nin];
    let (wgrads, bgrads) = pgrads.split_at_mut(nout * nin);
    let mut dx = Tensor::zeros(&x.shape);
    for ni in 0..n {
        let xs = &x.data[ni * nin..(ni + 1) * nin];
        let dxs = &mut dx.data[ni * nin..(ni + 1) * nin];
        for o in 0..nout {
            let g = dy.data[ni * nout + o];
            bgrads[o] += g;
            axpy_into_f64(&mut wgrads[o * nin..(o + 1) * nin], g, xs);
            axpy_into_f64(dxs, g, &weights[o * nin..(o + 1) * nin]);
        }
    }
    Ok(dx)
}

#[allow(clippy::too_many_arguments)]
fn bn_back<R: Real>(
    x: &Tensor<R>,
    mut dy: Tensor<f64>,
    params: &[R],
    pgrads: &mut [f64],
    mean: &[f64],
    var: &[f64],
    n_feat: usize,
    spatial: bool,
) -> Result<Tensor<f64>> {
    let (stride, plane) = if spatial {
        (n_feat * x.shape[2] * x.shape[3], x.shape[2] * x.shape[3])
    } else {
        (n_feat, 1)
    };
    let n = x.data.len() / stride;
    let m = (n * plane) as f64;
    let gamma = &params[..n_feat];
    let (ggrads, bgrads) = pgrads.split_at_mut(n_feat);
    // dy doubles as the output buffer: each feature's segments are reduced
    // before they are overwritten, and segments of different features are
    // disjoint.
    for f in 0..n_feat {
        let inv = 1.0 / f64math::sqrt(var[f] + BN_EPS);
        let mf = mean[f];
        let mut cdot = 0.0f64;
        let mut dbeta = 0.0f64;
        for ni in 0..n {
            let base = ni * stride + f * plane;
            let (s, cd) =
                sum_and_cdot_mixed(&dy.data[base..base + plane], &x.data[base..base + plane], mf);
            dbeta += s;
            cdot += cd;
        }
        let dgamma = cdot * inv;
        ggrads[f] += dgamma;
        bgrads[f] += dbeta;
        let scale = gamma[f].to_f64() * inv;
        let c1 = dbeta / m;
        let c2 = dgamma / m;
        for ni in 0..n {
            let base = ni * stride + f * plane;
            let xin = &x.data[base..base + plane];
            let gout = &mut dy.data[base..base + plane];
            for (g, v) in gout.iter_mut().zip(xin.iter()) {
                let xh = (v.to_f64() - mf) * inv;
                *g = scale * (*g - c1 - xh * c2);
            }
        }
    }
    Ok(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::forward::forward_train;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_grads_match_hand_computation() {
        // y = W x + b with W = [[1, 2], [3, 4]], b = 0, x = [5, 7].
        let spec = NetSpec::new(vec![LayerSpec::Dense { nin: 2, nout: 2 }]);
        let mut state = NetState::<f64>::init(&spec, 0);
        state.params[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        state.params[4] = 0.0;
        state.params[5] = 0.0;
        let x = Tensor::new(&[1, 2], vec![5.0, 7.0]).unwrap();
        let (y, cache) = forward_train(&spec, &mut state, &x, 0, false).unwrap();
        assert_eq!(y.data, vec![19.0, 43.0]);
        let dout = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let (grads, dx) = backward_range(&spec, &state, &cache, &dout).unwrap();
        // dW = dy xT stacked, db = dy, dx = WT dy.
        assert_eq!(&grads[..4], &[5.0, 7.0, 5.0, 7.0]);
        assert_eq!(&grads[4..], &[1.0, 1.0]);
        assert_eq!(dx.data, vec![4.0, 6.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let spec = NetSpec::new(vec![LayerSpec::MaxPool2]);
        let mut state = NetState::<f64>::init(&spec, 0);
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 9.0, 3.0, 2.0]).unwrap();
        let (_, cache) = forward_train(&spec, &mut state, &x, 0, false).unwrap();
        let dout = Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let (_, dx) = backward_range(&spec, &state, &cache, &dout).unwrap();
        assert_eq!(dx.data, vec![0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn bn_input_gradient_sums_to_zero() {
        let spec = NetSpec::new(vec![LayerSpec::BatchNorm {
            n: 2,
            spatial: false,
        }]);
        let mut state = NetState::<f64>::init(&spec, 0);
        let x = rand_tensor(&[5, 2], 8);
        let (_, cache) = forward_train(&spec, &mut state, &x, 0, false).unwrap();
        let dout = rand_tensor(&[5, 2], 9);
        let (_, dx) = backward_range(&spec, &state, &cache, &dout).unwrap();
        for f in 0..2 {
            let s: f64 = (0..5).map(|n| dx.data[n * 2 + f]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_gradient_is_uniform_over_windows() {
        let spec = NetSpec::new(vec![LayerSpec::AvgPool3]);
        let mut state = NetState::<f64>::init(&spec, 0);
        // 1x1x1x2x3 input: windows are 1x2x2 and 1x2x1 along x.
        let x = Tensor::new(&[1, 1, 1, 2, 3], vec![0.0; 6]).unwrap();
        let (y, cache) = forward_train(&spec, &mut state, &x, 0, false).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1, 1, 2]);
        let dout = Tensor::new(&[1, 1, 1, 1, 2], vec![4.0, 6.0]).unwrap();
        let (_, dx) = backward_range(&spec, &state, &cache, &dout).unwrap();
        assert_eq!(dx.data, vec![1.0, 1.0, 3.0, 1.0, 1.0, 3.0]);
    }
}
