//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A forward pass records one node per primitive; `backward` walks the
//! nodes in reverse insertion order (which is a topological order by
//! construction) and accumulates gradients into parent slots. Parameters
//! enter the tape as named leaves pulled from a [`ParamStore`]; frozen
//! parameters never receive a gradient entry.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Backward rule for one recorded primitive.
pub trait OpBackward<F: Scalar> {
    fn name(&self) -> &'static str;

    /// One gradient contribution per parent, `None` where `needs` is false.
    fn backward(
        &self,
        parent_values: &[&Tensor<F>],
        out_value: &Tensor<F>,
        out_grad: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>>;
}

struct Node<F: Scalar> {
    parents: Vec<ValueId>,
    requires_grad: bool,
    back: Option<Box<dyn OpBackward<F>>>,
}

pub struct Tape<F: Scalar> {
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Tensor<F>>>,
    nodes: Vec<Node<F>>,
    param_ids: HashMap<String, ValueId>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), grads: Vec::new(), nodes: Vec::new(), param_ids: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<F>, node: Node<F>) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        self.nodes.push(node);
        id
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Node { parents: vec![], requires_grad: false, back: None })
    }

    /// A leaf that participates in gradient computation but is not a parameter.
    pub fn variable(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Node { parents: vec![], requires_grad: true, back: None })
    }

    /// Pull a named parameter onto the tape. Each name becomes a single leaf
    /// per tape, so repeated uses share one gradient slot. Frozen parameters
    /// join as constants.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> ValueId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let group = store.group(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let id = self.push(
            group.tensor.clone(),
            Node { parents: vec![], requires_grad: !group.frozen, back: None },
        );
        self.param_ids.insert(name.to_string(), id);
        id
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<F>,
        parents: Vec<ValueId>,
        back: Box<dyn OpBackward<F>>,
    ) -> ValueId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, Node { parents, requires_grad, back: Some(back) })
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn grad(&self, id: ValueId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn detach(&self, id: ValueId) -> Tensor<F> {
        self.values[id.0].clone()
    }

    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        self.backward_seeded(loss, F::ONE)
    }

    /// Backward with a custom seed gradient; gradient accumulation scales the
    /// seed rather than rescaling harvested gradients.
    pub fn backward_seeded(&mut self, loss: ValueId, seed: F) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.accumulate(loss, Tensor::scalar(seed));
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].back.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(out_grad) = self.grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let parents = node.parents.clone();
            let needs: Vec<bool> = parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_values: Vec<&Tensor<F>> = parents.iter().map(|p| &self.values[p.0]).collect();
            let contribs = node.back.as_ref().unwrap().backward(
                &parent_values,
                &self.values[idx],
                &out_grad,
                &needs,
            );
            debug_assert_eq!(contribs.len(), parents.len());
            drop(parent_values);
            for (parent, contrib) in parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    debug_assert_eq!(
                        c.shape(),
                        self.values[parent.0].shape(),
                        "gradient shape mismatch for parent of {}",
                        self.nodes[idx].back.as_ref().unwrap().name()
                    );
                    self.accumulate(*parent, c);
                }
            }
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, contrib: Tensor<F>) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Harvest gradients for every non-frozen parameter that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<F>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.param_ids {
            if let Some(g) = &self.grads[id.0] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    /// Accumulate this tape's parameter gradients into an external buffer.
    pub fn accumulate_param_grads(&self, acc: &mut BTreeMap<String, Tensor<F>>) {
        for (name, id) in &self.param_ids {
            if let Some(g) = &self.grads[id.0] {
                match acc.get_mut(name) {
                    Some(t) => t.add_assign(g),
                    None => {
                        acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
