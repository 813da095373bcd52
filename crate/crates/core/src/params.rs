//! Named parameter storage and per-example binding into a [`Graph`].

use std::collections::HashMap;

use crate::tensor::{Gradients, Graph, NodeId, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named set of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// A graph plus lazily-bound parameter leaves. Each parameter enters the graph
/// at most once, so every use of a parameter within one example shares a node.
pub struct Tape<'a> {
    pub graph: Graph,
    params: &'a ModelParams,
    bound: Vec<Option<NodeId>>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Tape {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(n) = self.bound[id.0] {
            return Ok(n);
        }
        let n = self.graph.leaf(self.params.get(id).clone())?;
        self.bound[id.0] = Some(n);
        Ok(n)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.graph.leaf(t)
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        self.graph.value(n)
    }

    pub fn bound_node(&self, id: ParamId) -> Option<NodeId> {
        self.bound[id.0]
    }

    /// Backpropagates `loss` and returns one gradient per parameter; parameters
    /// that did not influence the loss get `None` (an implicit zero).
    pub fn param_grads(mut self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        Ok(self.bound.iter().map(|b| b.and_then(|n| grads.take(n))).collect())
    }
}
