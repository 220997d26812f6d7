use super::params::ParamStore;
use super::tape::{Gradients, Tensor};

/// Adam with bias correction. Moments are allocated lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment of parameter `i`, once it has received a
    /// gradient.
    pub fn moments(&self, i: usize) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(i)?.as_ref()?, self.second.get(i)?.as_ref()?))
    }

    /// Restores the state saved from [`Adam::steps`] and [`Adam::moments`].
    pub fn restore(&mut self, steps: u64, moments: Vec<Option<(Tensor, Tensor)>>) {
        self.step = steps;
        let (first, second) = moments.into_iter().map(|m| m.unzip()).unzip();
        self.first = first;
        self.second = second;
    }

    /// Rounds the moment estimates to `f32`, matching checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for m in self.first.iter_mut().chain(self.second.iter_mut()).flatten() {
            m.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        assert_eq!(store.len(), grads.len(), "gradient layout does not match store");
        if self.first.len() != store.len() {
            self.first = vec![None; store.len()];
            self.second = vec![None; store.len()];
        }
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);

        for (i, (id, g)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads.iter()).enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.first[i].as_ref().expect("first moment");
            let v = self.second[i].as_ref().expect("second moment");
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
