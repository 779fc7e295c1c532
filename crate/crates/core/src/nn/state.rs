use rand::Rng;

use crate::error::{Result, TowerError};
use crate::nn::graph::{Gradients, Graph, ParamId, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Encoder,
    Head,
    Decoder,
    Classifier,
}

impl Owner {
    pub fn code(self) -> u8 {
        match self {
            Owner::Encoder => 0,
            Owner::Head => 1,
            Owner::Decoder => 2,
            Owner::Classifier => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Owner::Encoder,
            1 => Owner::Head,
            2 => Owner::Decoder,
            3 => Owner::Classifier,
            other => {
                return Err(TowerError::Format(format!(
                    "unknown parameter owner code {other}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub owner: Owner,
    pub value: Tensor<S>,
    /// Adam first moment.
    pub m: Tensor<S>,
    /// Adam second moment.
    pub v: Tensor<S>,
}

/// Every learnable tensor plus optimizer moments and the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelState<S> {
    params: Vec<Param<S>>,
    pub step: u64,
}

impl<S: Scalar> ModelState<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        owner: Owner,
        value: Tensor<S>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(TowerError::Usage(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name,
            owner,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// He-uniform weights (`fan_in` inputs per unit).
    pub fn push_he_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        owner: Owner,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::lit(rng.random_range(-bound..bound)))
            .collect();
        self.push(name, owner, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| TowerError::Usage(format!("no parameter named `{name}`")))
    }

    pub fn ids_of(&self, owner: Owner) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].owner == owner)
            .map(ParamId)
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Euclidean norm of all parameters owned by `owner`.
    pub fn norm_of(&self, owner: Owner) -> f64 {
        self.params
            .iter()
            .filter(|p| p.owner == owner)
            .map(|p| p.value.sq_norm().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Records parameter `id` on `g`; `trainable == false` binds it as a constant.
    pub fn bind(&self, g: &mut Graph<S>, id: ParamId, trainable: bool) -> Var {
        let value = self.params[id.0].value.clone();
        if trainable {
            g.param(id, value)
        } else {
            g.input(value)
        }
    }

    /// Drops every parameter owned by `owner` (e.g. a stale classifier).
    pub fn remove_owner(&mut self, owner: Owner) {
        self.params.retain(|p| p.owner != owner);
    }

    /// Zeroes optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            p.m.scale(S::zero());
            p.v.scale(S::zero());
        }
    }

    /// True when no parameter holds NaN or infinity.
    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        ModelState {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    owner: p.owner,
                    value: p.value.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                })
                .collect(),
            step: self.step,
        }
    }

    /// Validates that `grads` only mention known parameters.
    pub fn check_gradients(&self, grads: &Gradients<S>) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = self.params.get(id.0).ok_or_else(|| {
                TowerError::Usage(format!("gradient for unknown parameter {}", id.0))
            })?;
            if p.value.shape() != g.shape() {
                return Err(TowerError::Usage(format!(
                    "gradient shape {:?} for `{}` of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}
