//! Parameter storage, seeded initialisation, and the Adam optimiser.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::spec::{LayerSpec, NetSpec};
use crate::error::{CoreError, Result};
use crate::real::{f64math, Real};
use crate::rng;

/// Learnable parameters and batchnorm running statistics of one network.
///
/// Parameters are flat in layer order: convolution and dense layers store
/// weights then biases; batchnorm stores scale then shift. Running
/// statistics live outside the parameter vector (they are updated by
/// forward passes, not by the optimiser) and are kept in f64.
#[derive(Clone, Debug)]
pub struct NetState<R: Real> {
    /// Flat parameter vector, layout per [`NetSpec::param_offsets`].
    pub params: Vec<R>,
    /// Running means of every batchnorm feature, in layer order.
    pub bn_mean: Vec<f64>,
    /// Running (biased) variances of every batchnorm feature.
    pub bn_var: Vec<f64>,
}

impl<R: Real> NetState<R> {
    /// Seeded initialisation: weights are variance-scaling uniform over the
    /// fan-in, U[-sqrt(3/fan_in), +sqrt(3/fan_in)]; biases zero; batchnorm
    /// scale one, shift zero, running stats (0, 1).
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = rng::rng_from_seed(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv3 { cin, cout } => {
                    init_fan_in(&mut rng, &mut params, cout * cin * 27, cin * 27);
                    params.extend(core::iter::repeat(R::ZERO).take(cout));
                }
                LayerSpec::Conv2 { cin, cout } => {
                    init_fan_in(&mut rng, &mut params, cout * cin * 9, cin * 9);
                    params.extend(core::iter::repeat(R::ZERO).take(cout));
                }
                LayerSpec::Dense { nin, nout } => {
                    init_fan_in(&mut rng, &mut params, nout * nin, nin);
                    params.extend(core::iter::repeat(R::ZERO).take(nout));
                }
                LayerSpec::BatchNorm { n, .. } => {
                    params.extend(core::iter::repeat(R::ONE).take(n));
                    params.extend(core::iter::repeat(R::ZERO).take(n));
                }
                _ => {}
            }
        }
        debug_assert_eq!(params.len(), spec.param_count());
        let n_bn = spec.bn_feature_count();
        Self {
            params,
            bn_mean: vec![0.0; n_bn],
            bn_var: vec![1.0; n_bn],
        }
    }

    /// Converts parameters and running stats to an f64 state (for the
    /// finite-difference replica).
    pub fn to_f64(&self) -> NetState<f64> {
        NetState {
            params: self.params.iter().map(|p| p.to_f64()).collect(),
            bn_mean: self.bn_mean.clone(),
            bn_var: self.bn_var.clone(),
        }
    }
}

fn init_fan_in<R: Real>(
    rng: &mut rand_chacha::ChaCha8Rng,
    params: &mut Vec<R>,
    count: usize,
    fan_in: usize,
) {
    let bound = f64math::sqrt(3.0 / fan_in as f64);
    for _ in 0..count {
        let v: f64 = rng.gen_range(-bound..bound);
        params.push(R::from_f64(v));
    }
}

/// Adam optimiser state: first and second raw moment estimates plus the
/// step counter. Moments accumulate in f64 regardless of parameter storage.
#[derive(Clone, Debug)]
pub struct AdamState {
    /// First-moment estimates.
    pub m: Vec<f64>,
    /// Second-moment estimates.
    pub v: Vec<f64>,
    /// Completed update count.
    pub step: u64,
}

impl AdamState {
    /// Zeroed state for `n` parameters.
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One Adam update: beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias-corrected.
/// Parameters update in f64 and round back to storage precision.
pub fn adam_step<R: Real>(
    state: &mut AdamState,
    params: &mut [R],
    grads: &[f64],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(CoreError::invalid("optimiser shapes do not match"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(CoreError::diverged("non-finite gradient"));
    }
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(BETA1, t as f64);
    let bc2 = 1.0 - libm::pow(BETA2, t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        let p = params[i].to_f64() - lr * mhat / (f64math::sqrt(vhat) + EPS);
        params[i] = R::from_f64(p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = NetSpec::scoring(1).unwrap();
        let a = NetState::<f32>::init(&spec, 7);
        let b = NetState::<f32>::init(&spec, 7);
        let c = NetState::<f32>::init(&spec, 8);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.params.len(), spec.param_count());
        assert_eq!(a.bn_mean.len(), spec.bn_feature_count());
        // First conv weights bounded by sqrt(3/9).
        let bound = (3.0f32 / 9.0).sqrt() + 1e-6;
        for w in &a.params[..9 * 32] {
            assert!(w.abs() <= bound);
        }
        // Conv biases are zero.
        let offsets = spec.param_offsets();
        let bias_at = offsets[0] + 32 * 9;
        for b in &a.params[bias_at..bias_at + 32] {
            assert_eq!(*b, 0.0);
        }
    }

    #[test]
    fn bn_params_init_to_identity() {
        let spec = NetSpec::scoring(1).unwrap();
        let s = NetState::<f32>::init(&spec, 1);
        let offsets = spec.param_offsets();
        for (i, l) in spec.layers.iter().enumerate() {
            if let LayerSpec::BatchNorm { n, .. } = l {
                let at = offsets[i];
                for g in &s.params[at..at + n] {
                    assert_eq!(*g, 1.0);
                }
                for b in &s.params[at + n..at + 2 * n] {
                    assert_eq!(*b, 0.0);
                }
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(3);
        let mut p = [1.0f32, -2.0, 0.5];
        adam_step(&mut st, &mut p, &[0.0, 0.0, 0.0], 0.01).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_descends_constant_gradient() {
        let mut st = AdamState::new(1);
        let mut p = [0.0f64];
        for _ in 0..50 {
            adam_step(&mut st, &mut p, &[2.5], 0.01).unwrap();
        }
        assert!(p[0] < -0.4, "moved against the gradient: {}", p[0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for g in [1e-6, 1e-2, 10.0, 1e4] {
            let mut st = AdamState::new(1);
            let mut p = [0.0f64];
            adam_step(&mut st, &mut p, &[g], 0.001).unwrap();
            // mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps).
            let expect = 0.001 * g / (g + 1e-8);
            assert!((p[0].abs() - expect).abs() < 1e-12, "g={g} step={}", p[0]);
            // Within one percent of the learning rate across magnitudes.
            assert!((p[0].abs() - 0.001).abs() <= 0.001 * 0.01, "g={g} step={}", p[0]);
            assert!(p[0] < 0.0);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut st = AdamState::new(1);
        let mut p = [0.0f32];
        assert!(adam_step(&mut st, &mut p, &[f64::NAN], 0.01).is_err());
    }
}
