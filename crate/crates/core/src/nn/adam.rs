use ndarray::ArrayD;

use super::param::Param;
use super::tape::Grads;
use super::{cst, Scalar};

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched, which keeps disabled branches bit-stable.
pub struct Adam<F: Scalar> {
    entries: Vec<Entry<F>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

struct Entry<F: Scalar> {
    name: String,
    param: Param<F>,
    m: ArrayD<F>,
    v: ArrayD<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: Vec<(String, Param<F>)>, beta1: f64, beta2: f64) -> Self {
        let entries = params
            .into_iter()
            .map(|(name, param)| {
                let shape = param.value().raw_dim();
                Entry {
                    name,
                    param,
                    m: ArrayD::zeros(shape.clone()),
                    v: ArrayD::zeros(shape),
                }
            })
            .collect();
        Adam {
            entries,
            t: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, grads: &Grads<F>, lr: f64) {
        self.t += 1;
        let b1: F = cst(self.beta1);
        let b2: F = cst(self.beta2);
        let one = F::one();
        let corr1: F = cst(1.0 - self.beta1.powi(self.t as i32));
        let corr2: F = cst(1.0 - self.beta2.powi(self.t as i32));
        let lr: F = cst(lr);
        let eps: F = cst(self.eps);
        for e in &mut self.entries {
            let Some(g) = grads.get(&e.param) else {
                continue;
            };
            ndarray::Zip::from(&mut e.m).and(g).for_each(|m, &gv| {
                *m = b1 * *m + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut e.v).and(g).for_each(|v, &gv| {
                *v = b2 * *v + (one - b2) * gv * gv;
            });
            let mut new_val = (*e.param.value()).clone();
            ndarray::Zip::from(&mut new_val)
                .and(&e.m)
                .and(&e.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / corr1;
                    let vhat = v / corr2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
            e.param.set(new_val);
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    /// Moment tensors for checkpointing, in construction order.
    pub fn state(&self) -> impl Iterator<Item = (&str, &ArrayD<F>, &ArrayD<F>)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.m, &e.v))
    }

    pub fn load_state(&mut self, name: &str, m: ArrayD<F>, v: ArrayD<F>) -> bool {
        for e in &mut self.entries {
            if e.name == name {
                assert_eq!(e.m.shape(), m.shape(), "adam state shape mismatch");
                e.m = m;
                e.v = v;
                return true;
            }
        }
        false
    }

    pub fn param_names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }
}
