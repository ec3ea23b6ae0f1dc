//! SGD with momentum, global gradient-norm clipping, and selective L2
//! regularization (batch-norm parameters are exempt).

use super::layers::Param;

#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    pub clip: f64,
    /// Global gradient norm after clipping, recorded each step.
    pub last_norm: f64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, l2: f64, clip: f64) -> Self {
        assert!(lr > 0.0 && clip > 0.0);
        Sgd { lr, momentum, l2, clip, last_norm: 0.0 }
    }

    /// One update over the given parameters: add L2 to decaying parameters,
    /// clip the global gradient norm, then apply momentum SGD and clear the
    /// gradients.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        for p in params.iter_mut() {
            if p.decay && self.l2 > 0.0 {
                let reg = &p.value * self.l2;
                p.grad += &reg;
            }
        }
        let mut sq = 0.0;
        for p in params.iter() {
            sq += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.last_norm = norm * scale;
        for p in params.iter_mut() {
            if scale != 1.0 {
                p.grad.mapv_inplace(|g| g * scale);
            }
            let step = &p.grad * self.lr;
            p.vel.mapv_inplace(|v| v * self.momentum);
            p.vel -= &step;
            let vel = p.vel.clone();
            p.value += &vel;
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn param(vals: &[f64], decay: bool) -> Param {
        Param::new("p", ArrayD::from_shape_vec(vec![vals.len()], vals.to_vec()).unwrap(), decay)
    }

    #[test]
    fn quadratic_descent_converges() {
        // minimize 0.5 ||w||^2, gradient = w
        let mut p = param(&[4.0, -3.0], false);
        let mut opt = Sgd::new(0.2, 0.0, 0.0, 100.0);
        for _ in 0..100 {
            p.grad = p.value.clone();
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn clip_bounds_recorded_norm() {
        let mut p = param(&[30.0, 40.0], false); // grad norm 50
        p.grad = p.value.clone();
        let mut opt = Sgd::new(0.1, 0.0, 0.0, 5.0);
        opt.step(&mut [&mut p]);
        assert!((opt.last_norm - 5.0).abs() < 1e-12);
        // step = lr * clipped grad = 0.1 * (3, 4)
        assert!((p.value[[0]] - (30.0 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn unclipped_norm_recorded_as_is() {
        let mut p = param(&[0.3, 0.4], false);
        p.grad = p.value.clone();
        let mut opt = Sgd::new(0.1, 0.0, 0.0, 5.0);
        opt.step(&mut [&mut p]);
        assert!((opt.last_norm - 0.5).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = param(&[0.0], false);
        let mut opt = Sgd::new(1.0, 0.9, 0.0, 100.0);
        // constant gradient 1: v1 = -1, v2 = -1.9
        p.grad.fill(1.0);
        opt.step(&mut [&mut p]);
        assert!((p.value[[0]] + 1.0).abs() < 1e-12);
        p.grad.fill(1.0);
        opt.step(&mut [&mut p]);
        assert!((p.value[[0]] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn l2_skips_non_decay_params() {
        let mut a = param(&[2.0], true);
        let mut b = param(&[2.0], false);
        let mut opt = Sgd::new(0.1, 0.0, 0.5, 100.0);
        a.grad.fill(0.0);
        b.grad.fill(0.0);
        opt.step(&mut [&mut a, &mut b]);
        assert!((a.value[[0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
        assert_eq!(b.value[[0]], 2.0);
    }
}
