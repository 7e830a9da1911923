use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .unzip();
        AdamState { config, t: 0, m, v }
    }

    /// One bias-corrected Adam update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&[T]>]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "adam: one gradient slot per parameter");
        self.t += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), m.len(), "adam: parameter shape changed");
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
