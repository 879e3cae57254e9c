use super::{Result, TrainError};
use crate::tensor::{cst, Element, ParamStore, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam with decoupled weight decay:
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β1·m + (1 − β1)·g        v ← β2·v + (1 − β2)·g²
/// p ← p − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + ε)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Restores saved moments; each must match its parameter's size.
    pub fn from_state(config: AdamConfig, params: &ParamStore<T>, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        for moments in [&m, &v] {
            let got: Vec<usize> = moments.iter().map(Vec::len).collect();
            if got != sizes {
                return Err(TensorError::ShapeMismatch { op: "Adam::from_state", lhs: got, rhs: sizes }.into());
            }
        }
        Ok(Self { config, step, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Applies one update using each parameter's accumulated gradient (a
    /// parameter without one is treated as having a zero gradient). Every
    /// gradient is checked before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = params.get(id).grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NonFiniteGradient { param: params.name(id).to_string(), step: self.step + 1 });
                }
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate: lr, weight_decay: wd, beta1: b1, beta2: b2, eps } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = 1.0 - lr * wd;
        for ((tensor, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = tensor.grad().map(<[T]>::to_vec);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64().unwrap_or(0.0));
                let mi = b1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
                m[i] = cst(mi);
                v[i] = cst(vi);
                let p = data[i].to_f64().unwrap_or(0.0) * decay;
                data[i] = cst(p - lr * (mi / c1) / ((vi / c2).sqrt() + eps));
            }
        }
        Ok(())
    }
}
