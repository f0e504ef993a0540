use super::ops::{backprop, Op};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Every operation appends a node; [`Tape::backward`] walks the nodes in
/// reverse and returns the gradients of all leaves that require them. A tape
/// is owned by one thread; clone parameters into a fresh tape per step.
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    non_finite: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t`, tracking gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push_leaf(t.shape().to_vec(), data, t.requires_grad())
    }

    /// Records `t` as a trainable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push_leaf(t.shape().to_vec(), data, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push_leaf(t.shape().to_vec(), data, false)
    }

    /// Records a leaf directly in the tape's scalar type.
    pub fn leaf_raw(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != data.len() || len == 0 {
            return Err(Error::Invalid(format!(
                "leaf of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push_leaf(shape.to_vec(), data, requires_grad))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        self.check_values("leaf", &value);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.check_values(name, &value);
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        // Without a gradient path the op's saved buffers are dead weight.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_values(&mut self, name: &'static str, value: &[T]) {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.non_finite = Some(name);
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First element of `v`, typically a loss.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Copies `v` out as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node.value.iter().map(|x| x.as_f32()).collect();
        Tensor::new(&node.shape, data).expect("tape node shape")
    }

    /// Fails if any op output so far contained NaN or infinity (checked in
    /// debug builds on every op; release builds only check losses).
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Back-propagates from the scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Invalid("backward on an empty tape".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        self.check_finite()?;
        if !node.value[0].is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if node.needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaf_grads: Vec<Option<Vec<T>>> = Vec::new();
        leaf_grads.resize_with(loss.0 + 1, || None);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
            } else {
                backprop(&self.nodes, i, &g, &mut grads);
            }
        }
        self.nodes.clear();
        self.non_finite = None;
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn as_f32(&self, v: Var) -> Option<Vec<f32>> {
        self.get(v).map(|g| g.iter().map(|x| x.as_f32()).collect())
    }

    /// Adds the gradient of `v` into `target`'s gradient buffer.
    ///
    /// A leaf the loss does not depend on contributes zeros.
    pub fn write_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.as_f32(v) {
            Some(g) => target.accumulate_grad(&g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}
