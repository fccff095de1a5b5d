//! Decoupled-weight-decay Adam.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments for every parameter, zero at creation.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `decays[i]` selects which tensors receive weight decay.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        decays: &[bool],
        h: AdamWParams,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != decays.len() || params.len() != self.m.len() {
            return Err(Error::Precondition("parameter, gradient and state counts differ".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if !grads.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite { op: "adamw gradient" });
        }
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if decays[i] { 1.0 - h.lr * h.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gr.as_f64();
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gr;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gr * gr;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + h.eps);
                *w = T::from_f64(w.as_f64() * decay - h.lr * update);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares_f64).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64, wd: f64) -> AdamWParams {
        AdamWParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::zeros([1])];
        let g = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, &[true], hp(0.1, 0.0)).unwrap();
        assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_exempt_params_untouched() {
        let mut p = vec![Tensor::<f32>::scalar(2.0), Tensor::full([2, 2], 0.5)];
        let g = vec![Tensor::zeros([1]), Tensor::zeros([2, 2])];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, &[false, true], hp(0.1, 0.1)).unwrap();
        assert_eq!(p[0].data(), &[2.0]);
        assert!(p[1].data()[0] < 0.5);

        let mut q = vec![Tensor::<f32>::full([3], 1.5)];
        let mut opt = AdamW::new(&q);
        opt.step(&mut q, &[Tensor::zeros([3])], &[true], hp(0.1, 0.0)).unwrap();
        assert_eq!(q[0].data(), &[1.5; 3]);
    }

    #[test]
    fn non_finite_gradient_rejected_before_update() {
        let mut p = vec![Tensor::<f32>::scalar(1.0)];
        let mut opt = AdamW::new(&p);
        let err = opt.step(&mut p, &[Tensor::scalar(f32::NAN)], &[true], hp(0.1, 0.1));
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(p[0].data(), &[1.0]);
    }
}
