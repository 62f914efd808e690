//! Learning-rate schedule, layer-wise decay, AdamW and stochastic depth.

use qface_numerics::{Checkpoint, Grads, ParamStore, Real, RngStream, Tensor};

use crate::config::{OptimizerConfig, ScheduleConfig};
use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay
/// to `floor_lr` at `total_steps`. Steps past the end stay at the floor.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `decay^(depth - index)`: 1 for the topmost group, smaller towards the input.
pub fn layer_lr_scale(index: usize, depth: usize, decay: f64) -> f64 {
    decay.powi(depth.saturating_sub(index) as i32)
}

/// Decoupled-weight-decay Adam. Moments are kept in `T`.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimizerConfig,
    pub m: Grads<T>,
    pub v: Grads<T>,
    /// Completed updates.
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore<T>) -> Self {
        AdamW { cfg: cfg.clone(), m: Grads::zeros_like(store), v: Grads::zeros_like(store), step: 0 }
    }

    /// One update. `lr_scale(group)` multiplies `lr` per parameter group;
    /// decay applies only to parameters flagged for it.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Grads<T>,
        lr: f64,
        lr_scale: impl Fn(usize) -> f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer state covers {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps));
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let g = grads.get(id);
            if g.shape() != p.value.shape() {
                return Err(Error::Config(format!("gradient shape mismatch for {}", p.name)));
            }
            let plr = lr * lr_scale(p.group);
            let step = T::lit(plr);
            let shrink = T::lit(if p.decay { 1.0 - plr * self.cfg.weight_decay } else { 1.0 });
            let (ic1, ic2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            for (((w, &gj), mj), vj) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = tb1 * *mj + (T::one() - tb1) * gj;
                *vj = tb2 * *vj + (T::one() - tb2) * gj * gj;
                let mh = *mj * ic1;
                let vh = *vj * ic2;
                *w = *w * shrink - step * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn write_into(&self, store: &ParamStore<T>, ckpt: &mut Checkpoint) {
        for (id, p) in store.iter() {
            ckpt.push(format!("optim.m.{}", p.name), qface_numerics::AnyTensor::from_real(self.m.get(id).clone()));
            ckpt.push(format!("optim.v.{}", p.name), qface_numerics::AnyTensor::from_real(self.v.get(id).clone()));
        }
    }

    pub fn load_from(&mut self, store: &ParamStore<T>, ckpt: &Checkpoint, step: u64) -> Result<()> {
        for (id, p) in store.iter() {
            for (kind, buf) in [("m", self.m.get_mut(id)), ("v", self.v.get_mut(id))] {
                let name = format!("optim.{kind}.{}", p.name);
                let t = ckpt.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "entry `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                *buf = t.to_real::<T>();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Drop probability of block `layer` (0-based): `rate · layer / (depth − 1)`.
pub fn drop_prob(rate: f64, layer: usize, depth: usize) -> f64 {
    if depth <= 1 {
        rate
    } else {
        rate * layer as f64 / (depth - 1) as f64
    }
}

/// Keep decisions for one sample, one per block; `None` (evaluation) keeps all.
pub fn drop_path_mask(rate: f64, depth: usize, rng: Option<&mut RngStream>) -> Vec<bool> {
    match rng {
        None => vec![true; depth],
        Some(r) => (0..depth).map(|l| !r.bernoulli(drop_prob(rate, l, depth))).collect(),
    }
}

/// Residual factors `[depth][batch]`: 0 for a dropped branch, `1/keep_prob`
/// for a kept one.
pub fn drop_path_plan<T: Real>(rate: f64, depth: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<T>> {
    let mut plan = vec![Vec::with_capacity(batch); depth];
    for _ in 0..batch {
        let keep = drop_path_mask(rate, depth, Some(rng));
        for (l, &k) in keep.iter().enumerate() {
            let p = drop_prob(rate, l, depth);
            plan[l].push(if k { T::lit(1.0 / (1.0 - p)) } else { T::zero() });
        }
    }
    plan
}

/// Summed squared norm of all gradients, for logging.
pub fn grad_norm<T: Real>(grads: &Grads<T>, store: &ParamStore<T>) -> f64 {
    store
        .ids()
        .map(|id| grads.get(id).data().iter().map(|&g| g.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Zero tensor matching a parameter, for tests and resets.
pub fn zeros_for<T: Real>(store: &ParamStore<T>, id: qface_numerics::ParamId) -> Tensor<T> {
    Tensor::zeros(store.value(id).shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use qface_numerics::Purpose;

    fn sched() -> ScheduleConfig {
        ScheduleConfig { peak_lr: 1e-3, warmup_steps: 10, total_steps: 110, floor_lr: 1e-6, layer_decay: 0.85 }
    }

    #[test]
    fn schedule_landmarks() {
        let c = sched();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(10, &c) - 1e-3).abs() < 1e-15);
        assert!((lr_at(110, &c) - 1e-6).abs() < 1e-15);
        assert!((lr_at(60, &c) - (1e-3 + 1e-6) / 2.0).abs() < 1e-12);
        for s in 10..110 {
            assert!(lr_at(s + 1, &c) <= lr_at(s, &c));
        }
    }

    #[test]
    fn layer_scales() {
        assert_eq!(layer_lr_scale(7, 7, 0.85), 1.0);
        assert!((layer_lr_scale(6, 7, 0.85) - 0.85).abs() < 1e-15);
        assert!((layer_lr_scale(0, 6, 0.85) - 0.377149515625).abs() < 1e-12);
    }

    fn one_param(v: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full([1], v), 0, decay);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut s = one_param(0.7, true);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&cfg, &s);
        let g = Grads::zeros_like(&s);
        opt.update(&mut s, &g, 1e-2, |_| 1.0).unwrap();
        assert_eq!(s.value(s.find("p").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = one_param(0.5, false);
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(&cfg, &s);
        let mut g = Grads::zeros_like(&s);
        let id = s.find("p").unwrap();
        g.get_mut(id).data_mut()[0] = 1.0;
        opt.update(&mut s, &g, 1e-3, |_| 1.0).unwrap();
        let expect = 0.5 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((s.value(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut s = one_param(2.0, true);
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(&cfg, &s);
        let g = Grads::zeros_like(&s);
        opt.update(&mut s, &g, 0.1, |_| 1.0).unwrap();
        assert!((s.value(s.find("p").unwrap()).data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn drop_path_rates() {
        assert!(drop_path_mask(0.0, 6, Some(&mut RngStream::new(0, Purpose::DropPath))).iter().all(|&k| k));
        assert!(drop_path_mask(0.5, 6, None).iter().all(|&k| k));
        let mut rng = RngStream::new(3, Purpose::DropPath);
        let n = 10_000;
        let dropped = (0..n).filter(|_| !drop_path_mask(0.2, 6, Some(&mut rng))[5]).count() as f64;
        let sigma = (n as f64 * 0.2 * 0.8).sqrt();
        assert!((dropped - 0.2 * n as f64).abs() < 3.0 * sigma, "{dropped}");
    }

    #[test]
    fn bottom_block_never_dropped() {
        let plan: Vec<Vec<f64>> = drop_path_plan(0.2, 6, 50, &mut RngStream::new(1, Purpose::DropPath));
        assert!(plan[0].iter().all(|&f| f == 1.0));
        assert!(plan[5].iter().all(|&f| f == 0.0 || (f - 1.25).abs() < 1e-12));
    }
}
