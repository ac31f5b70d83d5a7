use ndarray::Array2;

use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay, matching the usual
/// deep-learning framework update:
/// `g ← g + wd·p;  b ← μ·b + g (b = g on the first step);  p ← p − lr·b`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    buffers: Option<Vec<Array2<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: None,
        }
    }

    pub fn step(&mut self, params: &mut [Array2<T>], grads: &[Array2<T>]) {
        let wd = self.weight_decay;
        let d: Vec<Array2<T>> = params
            .iter()
            .zip(grads)
            .map(|(p, g)| g + &p.mapv(|v| v * wd))
            .collect();
        let buffers = match self.buffers.take() {
            None => d,
            Some(mut bufs) => {
                for (b, g) in bufs.iter_mut().zip(&d) {
                    b.mapv_inplace(|v| v * self.momentum);
                    *b += g;
                }
                bufs
            }
        };
        for (p, b) in params.iter_mut().zip(&buffers) {
            p.scaled_add(-self.lr, b);
        }
        self.buffers = Some(buffers);
    }
}
