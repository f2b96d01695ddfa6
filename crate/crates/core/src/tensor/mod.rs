//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a plain value (shape + row-major data). When an
//! operand is attached to a [`Tape`], every operation is recorded and
//! [`Tensor::backward`] replays the tape in reverse to produce a
//! [`GradMap`] over the parameter leaves. Tensors detached from any
//! tape behave as constants and never receive gradient.
//!
//! Every operation checks its output for NaN/Inf and fails loudly:
//! training bugs surface at the op that produced them, not three
//! losses later.

mod fd;
mod io;
mod ops;

pub use fd::finite_diff_grad;
pub use io::{read_tensor, write_tensor};
pub use ops::gather_rows;
pub(crate) use ops::Op;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Stable identity of a trainable parameter, used as the key of a [`GradMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u64);

/// Dense multi-dimensional value, optionally attached to a differentiation graph.
///
/// Scalars have the empty shape `[]`. Invariant: `product(shape) == data.len()`.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<Node>,
}

#[derive(Clone)]
pub(crate) struct Node {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

impl Tensor {
    /// Builds a detached tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                details: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extracts the single value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from any differentiation graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<f64>, node: Option<Node>) -> Tensor {
        Tensor { shape, data, node }
    }

    /// Bypasses the finiteness check so guards against non-finite
    /// inputs can themselves be tested.
    #[cfg(test)]
    pub(crate) fn raw_for_tests(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.node.as_ref()
    }

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// parameter leaf of its graph. Consumes the graph: further use of
    /// the same tape is an error. Use [`Tensor::backward_retain`] to
    /// keep the graph alive.
    pub fn backward(&self) -> Result<GradMap> {
        backward_impl(self, false)
    }

    /// Like [`Tensor::backward`] but leaves the graph reusable.
    pub fn backward_retain(&self) -> Result<GradMap> {
        backward_impl(self, true)
    }
}

pub(crate) struct NodeRec {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) param: Option<ParamId>,
}

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<NodeRec>,
    pub(crate) params: HashMap<ParamId, usize>,
    pub(crate) consumed: bool,
}

/// Recording surface for one differentiation graph.
///
/// Build and traverse a tape from a single thread; tensors themselves
/// are plain values once detached.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                params: HashMap::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn borrow_mut(&self) -> std::cell::RefMut<'_, TapeInner> {
        self.inner.borrow_mut()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant leaf holding a copy of `t`'s value.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, None);
        Tensor::with_node(
            t.shape.clone(),
            t.data.clone(),
            Some(Node {
                tape: self.clone(),
                id,
            }),
        )
    }

    /// Records (or reuses) the leaf for a parameter. Attaching the same
    /// parameter twice yields the same node, so gradient contributions
    /// from every use site accumulate.
    pub fn param_leaf(&self, id: ParamId, value: &Tensor) -> Tensor {
        let existing = self.inner.borrow().params.get(&id).copied();
        let node_id = match existing {
            Some(nid) => nid,
            None => {
                let nid = self.push(value.shape.clone(), value.data.clone(), Op::Leaf, Some(id));
                self.inner.borrow_mut().params.insert(id, nid);
                nid
            }
        };
        let inner = self.inner.borrow();
        let rec = &inner.nodes[node_id];
        Tensor::with_node(
            rec.shape.clone(),
            rec.value.clone(),
            Some(Node {
                tape: self.clone(),
                id: node_id,
            }),
        )
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        param: Option<ParamId>,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(NodeRec {
            shape,
            value,
            op,
            param,
        });
        id
    }

    pub(crate) fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }
}

/// Gradients keyed by parameter identity; every requested parameter
/// appears exactly once with a gradient of the parameter's shape.
#[derive(Debug, Default)]
pub struct GradMap {
    map: BTreeMap<ParamId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }
}

fn backward_impl(loss: &Tensor, retain: bool) -> Result<GradMap> {
    let node = loss.node.as_ref().ok_or(Error::DetachedLoss)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape.clone()));
    }
    let mut inner = node.tape.borrow_mut();
    if inner.consumed {
        return Err(Error::GraphConsumed);
    }

    let n = inner.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
    grads[node.id] = Some(vec![1.0]);

    let TapeInner { nodes, params, .. } = &mut *inner;
    for id in (0..=node.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        // Param leaves must keep their gradient for collection below.
        if nodes[id].param.is_some() {
            grads[id] = Some(g.clone());
        }
        ops::accumulate_parents(nodes, &mut grads, id, &g);
    }

    let mut map = BTreeMap::new();
    for (&pid, &nid) in params.iter() {
        let rec = &nodes[nid];
        let g = grads[nid]
            .take()
            .unwrap_or_else(|| vec![0.0; rec.value.len()]);
        check_finite("backward", &g)?;
        map.insert(pid, Tensor::with_node(rec.shape.clone(), g, None));
    }
    if !retain {
        inner.consumed = true;
    }
    Ok(GradMap { map })
}
