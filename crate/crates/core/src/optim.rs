//! Adam and exponential moving averages over a [`ParamStore`].

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are held per parameter in store order
/// so that they can be checkpointed by name.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        let zeros = store
            .params()
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            contract!("optimizer state has the wrong number of moments");
        }
        for (old, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if old.dims() != new.dims() {
                contract!("moment shape {:?} does not match {:?}", new.dims(), old.dims());
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update using whatever gradients `grads` holds for this store's
    /// parameters. Parameters without a gradient are left untouched but
    /// still count towards the step.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        if store.params().len() != self.m.len() {
            contract!("optimizer was built for a different parameter store");
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in store.params().iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients of variables can still reference the forward graph;
            // keeping them in the moments would chain graphs across steps.
            let g = &g.detach();
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            if lr != 0.0 {
                let denom = ((&v / bc2)?.sqrt()? + eps)?;
                let update = ((&m / bc1)? / denom)?;
                var.set(&(var.as_tensor() - (update * lr)?)?)?;
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·params`; buffers are copied verbatim.
pub fn ema_update(ema: &ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        contract!("EMA decay {decay} outside [0, 1]");
    }
    if ema.params().len() != params.params().len() || ema.buffers().len() != params.buffers().len() {
        contract!("EMA and generator have different layouts");
    }
    for ((name, e), (_, p)) in ema.params().iter().zip(params.params()) {
        if e.shape() != p.shape() {
            contract!("EMA parameter `{name}` has shape {:?}, expected {:?}", e.dims(), p.dims());
        }
        let next = if decay == 0.0 {
            p.as_tensor().copy()?
        } else if decay == 1.0 {
            continue;
        } else {
            ((e.as_tensor() * decay)? + (p.as_tensor() * (1.0 - decay))?)?
        };
        e.set(&next)?;
    }
    for ((_, e), (_, p)) in ema.buffers().iter().zip(params.buffers()) {
        let value = p.lock().expect("buffer lock").copy()?;
        *e.lock().expect("buffer lock") = value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(value: f64) -> ParamStore {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dev = Device::Cpu;
        let mut init = Init::new(&mut store, &mut rng, DType::F64, &dev);
        init.constant("w", &[3], value).unwrap();
        store
    }

    fn values(store: &ParamStore) -> Vec<f64> {
        store.params()[0].1.as_tensor().to_vec1().unwrap()
    }

    #[test]
    fn moments_do_not_keep_the_graph() -> Result<()> {
        let store = store_with(2.0);
        let w = store.params()[0].1.as_tensor();
        // d/dw of w / sum(w) goes through a tracked division.
        let loss = w.broadcast_div(&w.sum_all()?)?.sqr()?.sum_all()?;
        let grads = loss.backward()?;
        let mut adam = Adam::new(AdamConfig::new(1e-3, (0.9, 0.999)), &store)?;
        adam.step(&store, &grads)?;
        assert!(adam.first_moments().iter().chain(adam.second_moments()).all(|m| !m.track_op()));
        Ok(())
    }

    #[test]
    fn ema_boundaries() -> Result<()> {
        let ema = store_with(0.0);
        let p = store_with(1.0);
        ema_update(&ema, &p, 1.0)?;
        assert_eq!(values(&ema), vec![0.0; 3]);
        ema_update(&ema, &p, 0.5)?;
        assert_eq!(values(&ema), vec![0.5; 3]);
        ema_update(&ema, &p, 0.0)?;
        assert_eq!(values(&ema), vec![1.0; 3]);
        assert!(ema_update(&ema, &p, 1.5).is_err());
        Ok(())
    }

    #[test]
    fn ema_gap_shrinks_geometrically() -> Result<()> {
        let ema = store_with(0.0);
        let p = store_with(1.0);
        for _ in 0..10 {
            ema_update(&ema, &p, 0.9)?;
        }
        let gap = 1.0 - values(&ema)[0];
        assert!((gap - 0.9f64.powi(10)).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn adam_first_step_moves_by_lr() -> Result<()> {
        let store = store_with(1.0);
        let mut adam = Adam::new(AdamConfig::new(0.1, (0.0, 0.999)), &store)?;
        let w = store.params()[0].1.as_tensor();
        let loss = (w.sqr()?.sum_all()? * 0.5)?;
        adam.step(&store, &loss.backward()?)?;
        for v in values(&store) {
            assert!((v - 0.9).abs() < 1e-6, "{v}");
        }
        assert_eq!(adam.steps(), 1);
        Ok(())
    }

    #[test]
    fn adam_zero_lr_keeps_params() -> Result<()> {
        let store = store_with(2.0);
        let mut adam = Adam::new(AdamConfig::new(0.0, (0.0, 0.999)), &store)?;
        let loss = store.params()[0].1.as_tensor().sum_all()?;
        adam.step(&store, &loss.backward()?)?;
        assert_eq!(values(&store), vec![2.0; 3]);
        Ok(())
    }

    #[test]
    fn adam_ignores_foreign_gradients() -> Result<()> {
        let store = store_with(1.0);
        let other = Var::ones(3, DType::F64, &Device::Cpu)?;
        let mut adam = Adam::new(AdamConfig::new(0.1, (0.0, 0.999)), &store)?;
        adam.step(&store, &other.as_tensor().sum_all()?.backward()?)?;
        assert_eq!(values(&store), vec![1.0; 3]);
        Ok(())
    }
}
