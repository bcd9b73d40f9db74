use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; the pairing
    /// must stay fixed across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Shape("moment buffers do not match parameters".into()));
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[1, 3]);
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.3);
        let mut opt = Adam::new(0.01).unwrap();
        let mut last = p.item();
        for _ in 0..20 {
            opt.step(&mut [&mut p], &[&g]).unwrap();
            assert!(p.item() < last);
            last = p.item();
        }
    }

    #[test]
    fn quadratic_bowl() {
        // f(w) = sum (w - c)^2, optimum at c
        let c = [1.5, -0.5, 3.0];
        let mut w = Tensor::zeros(&[1, 3]);
        let loss = |w: &Tensor| w.data().iter().zip(c).map(|(x, t)| (x - t).powi(2)).sum::<f64>();
        let initial = loss(&w);
        let mut opt = Adam::new(0.1).unwrap();
        for _ in 0..200 {
            let g = Tensor::matrix(1, 3, w.data().iter().zip(c).map(|(x, t)| 2.0 * (x - t)).collect()).unwrap();
            opt.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert!(loss(&w) < 1e-3 * initial, "{} vs {}", loss(&w), initial);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(f64::NAN);
        let mut opt = Adam::new(0.01).unwrap();
        assert!(matches!(opt.step(&mut [&mut p], &[&g]), Err(Error::Numerical(_))));
    }
}
