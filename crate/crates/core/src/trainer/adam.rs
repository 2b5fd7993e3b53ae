use crate::params::{Gradients, ParamGrad, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with lazy updates: a row-sparse gradient moves only the rows it
/// covers, and parameters without a gradient are left alone entirely.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            learning_rate,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate * (1.0 - BETA2.powi(t)).sqrt() / (1.0 - BETA1.powi(t));
        let (lr, b1, b2, eps) = (
            T::from_f64_lossy(lr),
            T::from_f64_lossy(BETA1),
            T::from_f64_lossy(BETA2),
            T::from_f64_lossy(EPSILON),
        );
        let one = T::one();
        let apply = |w: &mut [T], m: &mut [T], v: &mut [T], g: &[T]| {
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                w[k] = w[k] - lr * m[k] / (v[k].sqrt() + eps);
            }
        };
        for (id, grad) in grads.iter() {
            let i = id.index();
            let value = &mut store.get_mut(id).value;
            match grad {
                ParamGrad::Dense(g) => apply(value.data_mut(), self.m[i].data_mut(), self.v[i].data_mut(), g.data()),
                ParamGrad::Rows { rows, .. } => {
                    for (&r, g) in rows {
                        apply(value.row_mut(r), self.m[i].row_mut(r), self.v[i].row_mut(r), g);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(1, 2, &[1.0, -1.0]), false);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.update(&mut store, &grads);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn untouched_rows_and_params_stay_put() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("table", Tensor::from_f64(3, 1, &[1.0, 2.0, 3.0]), true);
        let other = store.add("other", Tensor::from_f64(1, 1, &[5.0]), false);
        let mut g = Graph::new(&store);
        let t = g.param(table);
        let row = g.gather_rows(t, vec![1]).unwrap();
        let loss = g.sum(row);
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(&store, 0.5);
        adam.update(&mut store, &grads);
        assert_eq!(store.value(table).data()[0], 1.0);
        assert_eq!(store.value(table).data()[2], 3.0);
        assert_ne!(store.value(table).data()[1], 2.0);
        assert_eq!(store.value(other).data(), &[5.0]);
        assert_eq!(adam.m[other.index()].data(), &[0.0]);
    }
}
