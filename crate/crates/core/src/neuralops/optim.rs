use super::{mismatch, OpError, Real, Tensor};

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
}

/// Named parameters with gradient and momentum buffers of matching shape.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let shape = value.shape();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape),
            velocity: Tensor::zeros(shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `g` into the gradient accumulator of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<(), OpError> {
        let p = &mut self.params[id.0];
        if p.grad.len() != g.len() {
            return Err(mismatch(
                "accumulate",
                format!("gradient of {} values for `{}`", g.len(), p.name),
            ));
        }
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill_zero());
    }

    /// Same parameters converted to another scalar type, with fresh buffers.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }
}

/// SGD with momentum: `v <- momentum * v + g; p <- p - lr * v`, then clears
/// the gradients.
///
/// All gradients are checked before any parameter moves, so a divergence error
/// leaves the set untouched.
pub fn sgd_step<T: Real>(params: &mut ParameterSet<T>, lr: f64, momentum: f64) -> Result<(), OpError> {
    if let Some(bad) = params.params.iter().find(|p| !p.grad.all_finite()) {
        return Err(OpError::Divergence {
            param: bad.name.clone(),
        });
    }
    for p in params.params.iter_mut() {
        let values = p.value.data_mut().iter_mut();
        for ((v, vel), g) in values.zip(p.velocity.data_mut()).zip(p.grad.data()) {
            let next = momentum * vel.as_f64() + g.as_f64();
            *vel = T::of(next);
            *v = T::of(v.as_f64() - lr * next);
        }
        p.grad.fill_zero();
    }
    Ok(())
}
