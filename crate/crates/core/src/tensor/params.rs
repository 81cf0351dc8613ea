//! Named parameter blocks with gradient and Adam moment storage, and the
//! detached gradient buffer the tape writes into during backward passes.

use crate::tensor::Matrix;

/// Index of a parameter block within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One learnable block: its value plus gradient and Adam moment buffers,
/// all shape-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            grad: grad.clone(),
            adam_m: grad.clone(),
            adam_v: grad,
            step_count: 0,
            value,
        }
    }
}

/// Ordered collection of named parameter blocks. Insertion order is part of
/// the model contract: checkpoints serialize blocks in this order, and
/// [`GradStore`] buffers are indexed parallel to it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.params.push(Parameter::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter_mut())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds a detached gradient buffer into the blocks' own grad fields.
    pub fn accumulate_grads(&mut self, store: &GradStore) {
        assert_eq!(store.grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(&store.grads) {
            p.grad.add_assign(g);
        }
    }
}

/// Gradient buffers parallel to a [`ParamSet`], kept separate so backward
/// passes can run while the parameter values stay immutably borrowed by the
/// tape.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Matrix>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradStore {
            grads: params
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_adds_into_grad_field() {
        let mut set = ParamSet::new();
        let id = set.add("w", Matrix::zeros(2, 2));
        let mut store = GradStore::zeros_like(&set);
        store.get_mut(id).as_mut_slice()[0] = 3.0;
        set.accumulate_grads(&store);
        set.accumulate_grads(&store);
        assert_eq!(set.get(id).grad.get(0, 0), 6.0);
    }

    #[test]
    fn find_by_name() {
        let mut set = ParamSet::new();
        let a = set.add("alpha", Matrix::scalar(1.0));
        set.add("beta", Matrix::scalar(2.0));
        assert_eq!(set.find("alpha"), Some(a));
        assert_eq!(set.find("missing"), None);
    }
}
