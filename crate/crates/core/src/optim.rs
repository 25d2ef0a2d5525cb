use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

/// Final fraction of the base learning rate under cosine decay.
pub const LR_FLOOR: f64 = 0.05;

/// Cosine decay from `base` at step 0 to `base * floor` at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = (step.min(total - 1) as f64) / ((total - 1) as f64);
    let c = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    base * (floor + (1.0 - floor) * c)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: Parameterized + ?Sized>(params: &P, lr: f64) -> Self {
        let shapes: Vec<Tensor> = params
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update. Rejects gradients that do not mirror the parameters or
    /// contain non-finite entries; nothing is modified in that case.
    pub fn step<P: Parameterized + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &[Tensor],
    ) -> Result<()> {
        let mut ps = params.params_mut();
        if ps.len() != grads.len() || ps.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} parameters, {} gradients, {} accumulators",
                ps.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in ps.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::shape(format!(
                    "adam: parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in ps
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (1.0 - b1) * gj;
                vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, PartialEq, Debug)]
    struct Scalar(Tensor);

    impl Parameterized for Scalar {
        fn params(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Scalar(Tensor::vector(vec![1.5, -2.0]));
        let mut opt = AdamState::new(&p, 0.1);
        let before = p.clone();
        opt.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
        assert!(opt.first_moments()[0].data().iter().all(|&v| v == 0.0));
        assert!(opt.second_moments()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps)
        let mut p = Scalar(Tensor::scalar(0.0));
        let mut opt = AdamState::new(&p, 0.1);
        opt.step(&mut p, &[Tensor::scalar(0.5)]).unwrap();
        let expected = -0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.0.data()[0] - expected).abs() < 1e-15);
        assert!((p.0.data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn deterministic() {
        let start = Scalar(Tensor::vector(vec![0.3, 0.7]));
        let g = [Tensor::vector(vec![0.2, -0.4])];
        let run = || {
            let mut p = start.clone();
            let mut opt = AdamState::new(&p, 0.01);
            opt.step(&mut p, &g).unwrap();
            opt.step(&mut p, &g).unwrap();
            (p, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = Scalar(Tensor::scalar(1.0));
        let mut opt = AdamState::new(&p, 0.1);
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(opt.step_count(), 0);
        assert_eq!(p.0.data(), &[1.0]);
    }
}
