//! Ordered store of named learnable tensors with gradient slots.

use std::collections::HashMap;

use super::{DiffError, Gradients, Tape, Tensor, VarId};

/// Every learnable tensor of a model, in a fixed registration order.
///
/// Iteration order is the insertion order, so registering the store on a
/// fresh tape yields the same `VarId` layout every step.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Result<usize, DiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DiffError> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, DiffError> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_entries(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Register every parameter on `tape`, returning ids in store order.
    pub fn register_all(&self, tape: &mut Tape) -> Vec<VarId> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Add the tape gradients of `ids` (store-ordered) into the grad slots.
    pub fn accumulate_grads(&mut self, ids: &[VarId], grads: &Gradients) -> Result<(), DiffError> {
        assert_eq!(ids.len(), self.tensors.len());
        for (t, &id) in self.tensors.iter_mut().zip(ids) {
            if let Some(g) = grads.of(id) {
                if g.len() != t.numel() {
                    return Err(DiffError::GradShape {
                        name: "<tape>".to_string(),
                        param: t.shape().to_vec(),
                        grad: vec![g.len()],
                    });
                }
                let slot = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s += gv;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(vec![1])),
            Err(DiffError::DuplicateParam(_))
        ));
        assert_eq!(s.get("w").unwrap().numel(), 4);
        assert!(s.get("missing").is_err());
    }

    #[test]
    fn grads_accumulate_additively() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(3.0)).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let ids = s.register_all(&mut tape);
            let sq = tape.mul(ids[0], ids[0]);
            let loss = tape.sum_all(sq);
            let g = tape.backward(loss).unwrap();
            s.accumulate_grads(&ids, &g).unwrap();
        }
        assert_eq!(s.get("w").unwrap().grad.as_ref().unwrap()[0], 12.0);
        s.zero_grads();
        assert_eq!(s.get("w").unwrap().grad.as_ref().unwrap()[0], 0.0);
    }
}
