use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
///
/// Tensors are reference counted so a forward pass can place them on a graph
/// without copying; mutation goes through copy-on-write.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a `[rows, cols]` matrix with Glorot-uniform initialization.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("valid shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, len: usize, value: f64) -> ParamId {
        self.add(name, Tensor::vector(vec![value; len]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    /// Mutable access to every tensor in registration order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(Arc::make_mut)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(Arc::as_ref))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Replaces every tensor with the same-named tensor from `source`,
    /// checking names and shapes.
    pub fn load_from<'a>(
        &mut self,
        source: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut filled = vec![false; self.len()];
        for (name, tensor) in source {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Lookup(format!("unexpected parameter {name}")))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    tensor.shape(),
                    self.get(id).shape()
                )));
            }
            self.tensors[id.0] = Arc::new(tensor.clone());
            filled[id.0] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Lookup(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.shared(Arc::clone(t), requires_grad))
                .collect(),
        }
    }
}

/// Parameters placed on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars that are already on a graph, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients after `graph.backward`, zero-filled for unused parameters.
    pub fn gradients(&self, graph: &Graph, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.ids())
            .map(|(&v, id)| {
                graph
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn load_checks_names_and_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.add_glorot("w", 2, 3, &mut rng);
        a.add_zeros("b", &[3]);
        let mut b = a.clone();
        b.get_mut(ParamId(0)).data_mut()[0] = 42.0;
        a.load_from(b.iter()).unwrap();
        assert_eq!(a.get(ParamId(0)).data()[0], 42.0);

        let mut wrong = ParamStore::new();
        wrong.add_zeros("w", &[3, 2]);
        wrong.add_zeros("b", &[3]);
        assert!(a.load_from(wrong.iter()).is_err());
        let mut partial = ParamStore::new();
        partial.add_zeros("w", &[2, 3]);
        assert!(a.load_from(partial.iter()).is_err());
        assert_eq!(a.scalar_count(), 9);
    }
}
