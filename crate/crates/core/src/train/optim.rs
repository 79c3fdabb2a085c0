use crate::diffcore::{Scalar, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &[Tensor<F>], lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<&Tensor<F>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let one = F::one();
        let c1 = F::lit(1.0 - self.beta1.powi(t));
        let c2 = F::lit(1.0 - self.beta2.powi(t));
        let lr = F::lit(self.lr);
        let decay = F::lit(1.0 - self.lr * self.weight_decay);
        let eps = F::lit(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            match grads[i] {
                Some(g) => {
                    for (((w, m), v), &gi) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (one - b1) * gi;
                        *v = b2 * *v + (one - b2) * gi * gi;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                None => {
                    for ((w, m), v) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m;
                        *v = b2 * *v;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = vec![Tensor::<f64>::row(vec![1.0, -2.0, 3.0])];
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0, 5e-5);
        let g = Tensor::row(vec![0.5, 0.5, -1.0]);
        for _ in 0..10 {
            opt.step(&mut p, &[Some(&g)]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // after one step the bias-corrected moments are g and g^2, so the
        // update is lr * sign(g) (up to eps) plus decay
        let mut p = vec![Tensor::<f64>::row(vec![1.0, -1.0])];
        let mut opt = AdamW::new(&p, 0.1, 0.01);
        let g = Tensor::row(vec![2.0, -0.5]);
        opt.step(&mut p, &[Some(&g)]);
        let want0 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 2.0 / (2.0 + 1e-8);
        let want1 = -(1.0 - 0.1 * 0.01) + 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - want0).abs() < 1e-12);
        assert!((p[0].data()[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![Tensor::<f64>::row(vec![5.0, -3.0])];
        let mut opt = AdamW::new(&p, 0.1, 0.0);
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * x);
            opt.step(&mut p, &[Some(&g)]);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2), "{:?}", p[0].data());
    }
}
