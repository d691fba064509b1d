//! Adam with global-norm gradient clipping.

use ndarray::Array2;

use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        let zeros = || params.values().iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` belongs to parameter `i`, `None` meaning zero.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array2<f64>>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        for (((value, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            match g {
                Some(g) => {
                    m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| b1 * m);
                    v.mapv_inplace(|v| b2 * v);
                }
            }
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.add("w", array![[1.0, -2.0]]);
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &[Some(array![[3.0, -0.5]])]);
        // bias-corrected first step is lr · sign(g) up to eps
        assert!((p.values()[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.values()[0][[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.add("w", array![[5.0]]);
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let g = p.values()[0].mapv(|w| 2.0 * (w - 1.5));
            opt.step(&mut p, &[Some(g)]);
        }
        assert!((p.values()[0][[0, 0]] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Some(array![[3.0]]), None, Some(array![[4.0]])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((g[2].as_ref().unwrap()[[0, 0]] - 0.8).abs() < 1e-12);
        let mut small = vec![Some(array![[0.1]])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[[0, 0]], 0.1);
    }
}
