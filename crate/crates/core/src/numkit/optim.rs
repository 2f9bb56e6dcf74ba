//! First-order optimizers: plain SGD (optional momentum / coupled weight
//! decay) and a decoupled-weight-decay adaptive variant.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// One SGD update: `p -= lr * (g + weight_decay * p)`, with optional
/// momentum buffering. Deterministic; errors on a non-positive rate.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Sgd> {
        if lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Sgd { lr, momentum: 0.0, weight_decay: 0.0, velocity: Vec::new() })
    }

    pub fn with_momentum(mut self, momentum: f64) -> Sgd {
        self.momentum = momentum;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Sgd {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() && self.momentum != 0.0 {
            self.velocity = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape, g.shape, "param/grad shape mismatch at {i}");
            for j in 0..p.data.len() {
                let eff = g.data[j] + self.weight_decay * p.data[j];
                let upd = if self.momentum != 0.0 {
                    let v = &mut self.velocity[i].data[j];
                    *v = self.momentum * *v + eff;
                    *v
                } else {
                    eff
                };
                p.data[j] -= self.lr * upd;
            }
        }
    }
}

/// Single plain-SGD step over a parameter list.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
    let mut opt = Sgd::new(lr)?;
    opt.step(params, grads);
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64) -> Result<AdamW> {
        if lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        Ok(AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn with_weight_decay(mut self, wd: f64) -> AdamW {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
            self.v = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape, g.shape, "param/grad shape mismatch at {i}");
            for j in 0..p.data.len() {
                let gj = g.data[j];
                let m = &mut self.m[i].data[j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                let v = &mut self.v[i].data[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                p.data[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps))
                    + self.lr * self.weight_decay * p.data[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::graph::Graph;

    #[test]
    fn rejects_non_positive_rate() {
        assert!(Sgd::new(0.0).is_err());
        assert!(Sgd::new(-0.1).is_err());
        assert!(AdamW::new(0.0).is_err());
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        sgd_step(&mut [&mut p], &[&g], 0.5).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
    }

    #[test]
    fn single_step_on_square() {
        // f(t) = t^2 at t=1, lr=0.1: gradient 2 -> t = 1 - 0.2 = 0.8
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        sgd_step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert!((p.data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_monotonically_decreases_convex_quadratic() {
        let mut theta = Tensor::new(vec![3], vec![3.0, -2.0, 1.5]);
        let mut last = f64::INFINITY;
        let mut opt = Sgd::new(0.05).unwrap();
        for _ in 0..200 {
            let mut g = Graph::new();
            let v = g.param(&theta);
            let sq = g.mul_elem(v, v);
            let loss = g.sum_all(sq);
            let value = g.scalar_value(loss);
            assert!(value <= last + 1e-12, "loss increased: {value} > {last}");
            last = value;
            let mut grads = g.backward(loss);
            let gt = grads.take(v);
            opt.step(&mut [&mut theta], &[&gt]);
        }
        assert!(last < 1e-3, "did not converge: {last}");
    }

    #[test]
    fn adamw_drives_quadratic_down() {
        let mut theta = Tensor::new(vec![4], vec![1.0, 2.0, -1.0, 0.5]);
        let mut opt = AdamW::new(0.05).unwrap().with_weight_decay(0.0);
        let loss_of = |t: &Tensor| t.data.iter().map(|v| v * v).sum::<f64>();
        let start = loss_of(&theta);
        for _ in 0..300 {
            let mut g = Graph::new();
            let v = g.param(&theta);
            let sq = g.mul_elem(v, v);
            let loss = g.sum_all(sq);
            let mut grads = g.backward(loss);
            let gt = grads.take(v);
            opt.step(&mut [&mut theta], &[&gt]);
        }
        assert!(loss_of(&theta) < 1e-4 * start);
    }
}
