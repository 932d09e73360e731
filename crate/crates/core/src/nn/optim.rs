use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// RMSProp (no momentum).
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub rho: f32,
    pub eps: f32,
    ms: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(store: &ParamStore) -> Self {
        RmsProp {
            rho: 0.9,
            eps: 1e-6,
            ms: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) {
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let ms = &mut self.ms[id.0];
            let p = store.get_mut(id);
            for ((w, &g), s) in p.data_mut().iter_mut().zip(g.data()).zip(ms.data_mut()) {
                *s = self.rho * *s + (1.0 - self.rho) * g * g;
                *w -= lr * g / (s.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{ParamId, ParamKind};

    fn quadratic_descent(mut stepper: impl FnMut(&mut ParamStore, &Gradients)) -> f32 {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), ParamKind::Weight);
        for _ in 0..500 {
            let mut g = Gradients::new(1);
            let w = store.get(id).data().to_vec();
            g.accumulate(ParamId(0), &[2.0 * w[0], 2.0 * w[1]], &[2]);
            stepper(&mut store, &g);
        }
        store.get(id).data().iter().map(|v| v.abs()).fold(0.0, f32::max)
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]), ParamKind::Weight);
        let mut opt = Adam::new(&store);
        assert!(quadratic_descent(|s, g| opt.step(s, g, 0.05)) < 0.05);
    }

    #[test]
    fn rmsprop_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]), ParamKind::Weight);
        let mut opt = RmsProp::new(&store);
        assert!(quadratic_descent(|s, g| opt.step(s, g, 0.01)) < 0.05);
    }
}
