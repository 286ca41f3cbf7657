use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Private parameters never leave their site; shared ones are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Private,
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub partition: Partition,
}

/// Named trainable tensors, each tagged with exactly one [`Partition`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    params: BTreeMap<String, Param>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor, partition: Partition) {
        self.params.insert(path.into(), Param { tensor, partition });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {path}")))
    }

    pub fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn paths_in(&self, part: Partition) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.partition == part)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn partition_of(&self, path: &str) -> Option<Partition> {
        self.params.get(path).map(|p| p.partition)
    }

    pub fn set_partition(&mut self, path: &str, part: Partition) -> Result<()> {
        self.params
            .get_mut(path)
            .map(|p| p.partition = part)
            .ok_or_else(|| Error::contract(format!("unknown parameter {path}")))
    }

    /// Relabels every parameter as shared (plain FedAvg has no private set).
    pub fn make_all_shared(&mut self) {
        self.params.values_mut().for_each(|p| p.partition = Partition::Shared);
    }

    /// Detached copies of one partition.
    pub fn subset(&self, part: Partition) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| p.partition == part)
            .map(|(k, p)| (k.clone(), p.tensor.detach()))
            .collect()
    }

    pub fn shared(&self) -> BTreeMap<String, Tensor> {
        self.subset(Partition::Shared)
    }

    /// Overwrites the whole shared set. The incoming path set must equal the
    /// local shared set and every shape must match.
    pub fn load_shared(&mut self, incoming: &BTreeMap<String, Tensor>) -> Result<()> {
        let mine = self.paths_in(Partition::Shared);
        if mine.len() != incoming.len() || mine.iter().any(|p| !incoming.contains_key(p)) {
            return Err(Error::protocol(format!(
                "shared path set mismatch: have {}, received {}",
                mine.len(),
                incoming.len()
            )));
        }
        for (path, t) in incoming {
            let slot = self.tensor_mut(path)?;
            if slot.shape() != t.shape() {
                return Err(Error::protocol(format!(
                    "{path}: shape {:?} received for {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.detach();
        }
        Ok(())
    }

    /// Joins a shared set with a private set into a full tree.
    pub fn assemble(
        shared: &BTreeMap<String, Tensor>,
        private: &BTreeMap<String, Tensor>,
    ) -> Result<ParamTree> {
        let mut tree = ParamTree::new();
        for (path, t) in shared {
            tree.insert(path.clone(), t.detach(), Partition::Shared);
        }
        for (path, t) in private {
            if tree.params.contains_key(path) {
                return Err(Error::contract(format!("{path} is both shared and private")));
            }
            tree.insert(path.clone(), t.detach(), Partition::Private);
        }
        Ok(tree)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies leaf gradients from a graph into the owning tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &BTreeMap<String, Var>) -> Result<()> {
        for (path, &v) in vars {
            if let Some(grad) = g.grad(v) {
                self.tensor_mut(path)?.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Mutable views of the named parameters, for an optimizer step.
    pub fn select_mut<'a>(&'a mut self, paths: &[String]) -> Vec<(&'a str, &'a mut Tensor)> {
        self.params
            .iter_mut()
            .filter(|(k, _)| paths.binary_search(k).is_ok())
            .map(|(k, p)| (k.as_str(), &mut p.tensor))
            .collect()
    }

    /// Bitwise equality of every tensor and label.
    pub fn bit_eq(&self, other: &ParamTree) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb && a.partition == b.partition && a.tensor.bit_eq(&b.tensor)
            })
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }
}

/// Lazily places parameters on a graph the first time a layer asks for them,
/// so the set of bound paths is exactly what the forward pass consumed.
pub struct Binder<'a> {
    tree: &'a ParamTree,
    frozen: bool,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(tree: &'a ParamTree) -> Self {
        Self {
            tree,
            frozen: false,
            vars: BTreeMap::new(),
        }
    }

    /// Parameters enter the graph as constants and receive no gradient.
    pub fn frozen(tree: &'a ParamTree) -> Self {
        Self {
            tree,
            frozen: true,
            vars: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph, path: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(path) {
            return Ok(v);
        }
        let t = self.tree.tensor(path)?;
        let v = if self.frozen { g.constant(t) } else { g.param(t) };
        self.vars.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Paths read by the forward pass, sorted.
    pub fn used_paths(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn into_vars(self) -> BTreeMap<String, Var> {
        self.vars
    }
}
