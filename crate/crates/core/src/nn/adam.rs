//! Adam optimizer with bias correction.

use ndarray::ArrayD;

use super::{ParamStore, Real};

pub struct Adam<F> {
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let m = store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        let v = store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        Self { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update with learning rate `lr`. `grads` must be in the
    /// store's canonical parameter order.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[ArrayD<F>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = F::from_f64(lr / bias1);
        let bias2_sqrt = F::from_f64(bias2.sqrt());
        let eps = F::from_f64(self.eps);

        for (i, grad) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, g| {
                *m = b1 * *m + (one - b1) * *g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, g| {
                *v = b2 * *v + (one - b2) * *g * *g;
            });
            let param = store.get_mut(super::ParamId(i));
            ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, m, v| {
                *p = *p - step_size * *m / (v.sqrt() / bias2_sqrt + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{params, Graph};

    #[test]
    fn adam_minimizes_quadratic() {
        // minimize mean((x - target)^2) over x
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", params::zeros(&[4]));
        let target = ndarray::arr1(&[1.0, -2.0, 0.5, 3.0]).into_dyn();
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let mut g = Graph::new();
            let leaves = store.leaves(&mut g, true);
            let t = g.leaf(target.clone(), false);
            let diff = g.sub(leaves[x.0], t);
            let sq = g.mul(diff, diff);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);
            let grads = store.collect_grads(&leaves, &grads);
            adam.step(&mut store, &grads, 0.05);
        }
        for (got, want) in store.get(x).iter().zip(target.iter()) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }
}
