use crate::model::Network;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(net: &Network<f32>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || net.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the gradients stored on the parameters, then clears them.
    pub fn step(&mut self, net: &mut Network<f32>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let wd = self.weight_decay as f32;
        let (c1, c2, eps) = (c1 as f32, c2 as f32, self.eps as f32);
        for ((p, m), v) in net.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let value = &mut p.value;
            let Some(grad) = value.grad.take() else { continue };
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *w;
                *w -= lr * update;
            }
        }
    }
}
