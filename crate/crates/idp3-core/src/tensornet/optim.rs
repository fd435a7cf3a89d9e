//! Named parameters and the AdamW update.

use super::tensor::Tensor;
use super::TensornetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with gradient and optimizer state. Frozen parameters
/// (`trainable == false`) ride along in checkpoints but are never updated;
/// normalization statistics are stored this way.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub trainable: bool,
}

impl Param {
    fn new(name: &str, value: Tensor, trainable: bool) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.to_string(),
            value,
            gradient: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            step_count: 0,
            trainable,
        }
    }
}

/// The full parameter collection of a model, in registration order.
/// Names are unique; lookups by name exist for checkpoint loading and tests.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_inner(name, value, true)
    }

    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_inner(name, value, false)
    }

    fn add_inner(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Param::new(name, value, trainable));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total element count across trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// One decoupled-weight-decay Adam step over every trainable parameter,
    /// consuming the current gradients (they are zeroed afterwards). Errors
    /// if any gradient is non-finite; values are untouched in that case.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig) -> Result<(), TensornetError> {
        for p in &self.params {
            if p.trainable && !p.gradient.all_finite() {
                return Err(TensornetError::NonFinite(format!(
                    "gradient of {:?} is non-finite",
                    p.name
                )));
            }
        }
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            p.step_count += 1;
            let t = p.step_count;
            let bc1 = 1.0 - cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(t as i32);
            let n = p.value.numel();
            for i in 0..n {
                let g = p.gradient.data()[i];
                // Decay is applied to the incoming value, before the moment
                // update touches it.
                let decayed = p.value.data()[i] * (1.0 - cfg.lr * cfg.weight_decay);
                let m = cfg.beta1 * p.first_moment.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.second_moment.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.first_moment.data_mut()[i] = m;
                p.second_moment.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] = decayed - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.gradient.data_mut().fill(0.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}
