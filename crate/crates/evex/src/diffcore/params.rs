//! Long-lived named parameters. A [`ParamStore`] survives across documents;
//! every forward pass registers its parameters on a fresh tape and harvests
//! the tape gradients back into per-parameter accumulators afterwards.

use super::tape::{Tape, Var};
use crate::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Token embeddings, encoder projection, tagging and pair heads.
    Encoder,
    /// Proxy embeddings, graph, attention and classification heads.
    Rest,
}

/// Index of a parameter inside its store. Stable for the life of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad_accum: Vec<f64>,
    pub group: ParamGroup,
}

/// Ordered collection of named parameters. Registration order is fixed at
/// construction, which keeps initialization and optimizer traversal
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "param_store",
                format!("parameter {}: shape {:?} vs {} values", name, shape, data.len()),
            ));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {}", name)));
        }
        let n = data.len();
        self.params.push(Parameter {
            name,
            shape,
            data,
            grad_accum: vec![0.0; n],
            group,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Registers every parameter on `tape`, in store order. The returned
    /// vector is indexed by [`ParamId`].
    pub fn register_all(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.param(p.data.clone(), p.shape.clone()))
            .collect()
    }

    /// Adds the tape gradients of the registered vars into the per-parameter
    /// accumulators (gradient accumulation across a batch).
    pub fn harvest_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                for (acc, gi) in p.grad_accum.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad_accum.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Scales accumulated gradients, e.g. by 1/batch before an Adam step.
    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad_accum.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad_accum.iter().all(|g| g.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_harvest() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", vec![2], vec![1.0, 2.0], ParamGroup::Rest)
            .unwrap();
        let mut tape = Tape::new();
        let vars = store.register_all(&mut tape).unwrap();
        let loss = {
            let y = tape.mul(vars[0], vars[0]).unwrap();
            tape.sum_all(y)
        };
        tape.backward(loss).unwrap();
        store.harvest_grads(&tape, &vars);
        assert_eq!(store.get(id).grad_accum, vec![2.0, 4.0]);
        store.harvest_grads(&tape, &vars);
        assert_eq!(store.get(id).grad_accum, vec![4.0, 8.0]);
        store.zero_grads();
        assert_eq!(store.get(id).grad_accum, vec![0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", vec![1], vec![0.0], ParamGroup::Rest).unwrap();
        assert!(store.add("w", vec![1], vec![0.0], ParamGroup::Rest).is_err());
    }
}
