//! Adam and the dual-ensemble training scheme.
//!
//! Module A members train on the normal pool joined with the unlabeled pool,
//! module B members on the normal pool alone. Members share no parameters,
//! so each one is trained on its own mean loss.

use std::fmt;
use std::io::Write;

use ddad_autograd::{Element, Parameter, TensorError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig, BackboneNet, Mode};
use crate::data::{batches, mix_seed, ImagePool};
use crate::error::{DdadError, Result};

/// Offset between the member seeds of module A and module B.
pub const MODULE_B_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// ensemble size
    pub k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            learning_rate: 5e-4,
            batch_size: 64,
            k: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DdadError::Config(m));
        if self.k == 0 {
            return fail("ensemble size K must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("invalid learning rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("adam betas ({}, {}) outside [0, 1)", self.beta1, self.beta2));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return fail(format!("adam eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    /// Init and shuffle seed of member `i` of `role`.
    pub fn member_seed(&self, role: Role, i: usize) -> u64 {
        let offset = match role {
            Role::A => 0,
            Role::B => MODULE_B_SEED_OFFSET,
        };
        self.base_seed.wrapping_add(offset).wrapping_add(i as u64)
    }
}

/// First and second moments of every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. `None` gradients count as zero.
///
/// Every gradient is checked before any parameter moves, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adam_step<T: Element>(
    params: &[Parameter<T>],
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if m.len() != p.value.numel() {
            return Err(TensorError::Shape(format!("adam_step: moment size mismatch for {}", p.name)));
        }
        if let Some(g) = g {
            if g.len() != m.len() {
                return Err(TensorError::Shape(format!("adam_step: gradient size mismatch for {}", p.name)));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(TensorError::Numerical(format!("non-finite gradient {bad} in {}", p.name)));
            }
        }
    }

    state.t += 1;
    let (b1, b2) = betas;
    let t = state.t as i32;
    let c1 = T::from_f64(1.0 - b1.powi(t));
    let c2 = T::from_f64(1.0 - b2.powi(t));
    let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
    let one = T::one();
    for (i, p) in params.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.value.data_mut();
        let grad = grads[i].as_deref();
        for j in 0..data.len() {
            let g = grad.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Trains `net` in place and returns the mean loss of every epoch.
///
/// `seed` drives the shuffle order; epoch `e` uses `mix_seed(seed, e)`.
/// Epoch means weight each batch by its size.
pub fn train_network(
    net: &mut BackboneNet<f32>,
    pool: &ImagePool,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    if pool.is_empty() {
        return Err(DdadError::Config("cannot train on an empty dataset".into()));
    }
    let params = net.parameters();
    let mut adam = AdamState::new(&params);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for (b, batch) in batches(pool, config.batch_size, mix_seed(seed, epoch as u64))?.enumerate() {
            let batch = batch?;
            let numerical = |message: String| DdadError::Numerical { epoch, batch: b, message };
            let x = batch.pixels;
            let out = net.forward(&x, Mode::Train)?;
            let loss = net.loss(&x, &out).map_err(|e| match e {
                DdadError::Tensor(TensorError::Numerical(m)) => numerical(m),
                other => other,
            })?;
            let value = loss.item()? as f64;
            if !value.is_finite() {
                return Err(numerical(format!("loss is {value}")));
            }
            loss.backward()?;
            let grads: Vec<_> = params.iter().map(|p| p.value.grad()).collect();
            net.zero_grad();
            adam_step(&params, &grads, &mut adam, config.learning_rate, (config.beta1, config.beta2), config.eps)
                .map_err(|e| match e {
                    TensorError::Numerical(m) => numerical(m),
                    other => other.into(),
                })?;
            total += value * x.shape()[0] as f64;
        }
        curve.push(total / pool.len() as f64);
    }
    Ok(curve)
}

/// Builds a network initialized from `seed` and trains it with the same seed.
pub fn train_member(
    backbone: &BackboneConfig,
    pool: &ImagePool,
    config: &TrainConfig,
    seed: u64,
) -> Result<(BackboneNet<f32>, Vec<f64>)> {
    let mut net = build_backbone(&backbone.with_seed(seed))?;
    let curve = train_network(&mut net, pool, config, seed)?;
    Ok((net, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// trained on normal and unlabeled images
    A,
    /// trained on normal images only
    B,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::A => "A",
            Role::B => "B",
        })
    }
}

/// K networks of one role.
#[derive(Debug)]
pub struct EnsembleModule {
    pub role: Role,
    pub nets: Vec<BackboneNet<f32>>,
    /// Per-member loss curves; empty for modules loaded from checkpoints.
    pub loss_curves: Vec<Vec<f64>>,
}

impl EnsembleModule {
    pub fn k(&self) -> usize {
        self.nets.len()
    }

    pub fn backbone(&self) -> Option<&BackboneConfig> {
        self.nets.first().map(BackboneNet::config)
    }
}

/// Trains the K members of one role. Members run in parallel; results do not
/// depend on scheduling because members share nothing but the read-only pool.
pub fn train_ensemble(
    role: Role,
    pool: &ImagePool,
    backbone: &BackboneConfig,
    config: &TrainConfig,
) -> Result<EnsembleModule> {
    config.validate()?;
    backbone.validate()?;
    let trained: Vec<_> = (0..config.k)
        .into_par_iter()
        .map(|i| train_member(backbone, pool, config, config.member_seed(role, i)))
        .collect::<Result<_>>()?;
    let (nets, loss_curves) = trained.into_iter().unzip();
    Ok(EnsembleModule { role, nets, loss_curves })
}

/// Module A on `normal ∪ unlabeled`, module B on `normal`.
pub fn train_dual_ensembles(
    normal: &ImagePool,
    unlabeled: &ImagePool,
    backbone: &BackboneConfig,
    config: &TrainConfig,
) -> Result<(EnsembleModule, EnsembleModule)> {
    if normal.is_empty() {
        return Err(DdadError::Config("normal pool is empty".into()));
    }
    let combined = normal.concat(unlabeled)?;
    let a = train_ensemble(Role::A, &combined, backbone, config)?;
    let b = train_ensemble(Role::B, normal, backbone, config)?;
    Ok((a, b))
}

/// Writes `epoch,member,role,loss` rows for every member of `modules`.
pub fn write_loss_csv<W: Write>(mut out: W, modules: &[&EnsembleModule]) -> Result<()> {
    writeln!(out, "epoch,member,role,loss")?;
    for module in modules {
        for (member, curve) in module.loss_curves.iter().enumerate() {
            for (epoch, loss) in curve.iter().enumerate() {
                writeln!(out, "{},{member},{},{loss}", epoch + 1, module.role)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddad_autograd::Tensor;

    fn param(values: Vec<f64>) -> Parameter<f64> {
        let n = values.len();
        Parameter::new("p", Tensor::parameter(values, &[n]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = [param(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&p, &[Some(vec![0.0, 0.0])], &mut s, 1e-2, (0.9, 0.999), 1e-8).unwrap();
        }
        assert_eq!(p[0].value.to_vec(), vec![1.0, -2.0]);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = [param(vec![0.0, 0.0, 0.0])];
        let mut s = AdamState::new(&p);
        let g = vec![3.0, -0.5, 1e-2];
        adam_step(&p, &[Some(g.clone())], &mut s, 1e-3, (0.9, 0.999), 1e-8).unwrap();
        for (theta, g) in p[0].value.to_vec().iter().zip(&g) {
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((theta - expected).abs() < 1e-12, "{theta} vs {expected}");
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let p = [param(vec![1.0])];
        let mut s = AdamState::new(&p);
        let err = adam_step(&p, &[Some(vec![f64::NAN])], &mut s, 1e-3, (0.9, 0.999), 1e-8).unwrap_err();
        assert!(matches!(err, TensorError::Numerical(_)));
        assert_eq!(p[0].value.to_vec(), vec![1.0]);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn identical_inputs_identical_parameters() {
        let run = || {
            let p = [param(vec![0.3, -0.7])];
            let mut s = AdamState::new(&p);
            for i in 0..10 {
                let g = vec![(i as f64).sin(), (i as f64 * 0.3).cos()];
                adam_step(&p, &[Some(g)], &mut s, 1e-2, (0.9, 0.999), 1e-8).unwrap();
            }
            p[0].value.to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.learning_rate, c.batch_size, c.k), (250, 5e-4, 64, 3));
        assert!(TrainConfig { k: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert_eq!(c.member_seed(Role::A, 2), 2);
        assert_eq!(TrainConfig { base_seed: 7, ..c }.member_seed(Role::B, 1), 1008);
    }
}
