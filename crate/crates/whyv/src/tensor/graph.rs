//! Computation tape: values, nodes, and the reverse pass.
//!
//! A [`Graph`] records one forward pass. Ops push nodes in execution order,
//! which is already a topological order, so [`Graph::backward`] is a single
//! reverse sweep. The tape can be replayed backward exactly once. A
//! non-recording graph runs the same kernels but keeps no backward state,
//! which is the inference path.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

pub type NodeId = usize;

/// Per-op backward step. Returns one gradient per parent slot, aligned with
/// the parent list the node was recorded with.
pub(crate) trait Backward {
    fn backward(&self, grad: &Tensor) -> Result<Vec<Tensor>>;
    fn name(&self) -> &'static str;
}

/// Leaf marker; leaves keep their accumulated gradient.
struct LeafBackward;

impl Backward for LeafBackward {
    fn backward(&self, _grad: &Tensor) -> Result<Vec<Tensor>> {
        Ok(Vec::new())
    }
    fn name(&self) -> &'static str {
        "leaf"
    }
}

struct Node {
    parents: Vec<Option<NodeId>>,
    back: Box<dyn Backward>,
    is_leaf: bool,
    shape: Vec<usize>,
}

struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// A tensor value produced on a graph. Cheap to clone; `node` is `Some`
/// when the value participates in gradient tracking.
#[derive(Clone)]
pub struct Value {
    data: Rc<Tensor>,
    node: Option<NodeId>,
}

impl Value {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.data)
    }
}

pub struct Graph {
    tape: RefCell<Tape>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Forward/backward passes allocate and free multi-megabyte buffers every
/// step; with glibc defaults those round-trip through mmap/munmap and the
/// page faults dominate the runtime. Raising the thresholds keeps the
/// buffers on the heap free lists.
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}

impl Graph {
    /// Recording graph: ops are taped for a later backward pass.
    pub fn new() -> Self {
        tune_allocator();
        Self { tape: RefCell::new(Tape { nodes: Vec::new(), consumed: false }), recording: true }
    }

    /// Non-recording graph: same numerics, no backward state retained.
    pub fn inference() -> Self {
        tune_allocator();
        Self { tape: RefCell::new(Tape { nodes: Vec::new(), consumed: false }), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Registers `t` as a differentiable leaf (a `requires_grad` tensor).
    /// On a non-recording graph this degrades to a constant.
    pub fn leaf(&self, t: Tensor) -> Value {
        if !self.recording {
            return Value { data: Rc::new(t), node: None };
        }
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            parents: Vec::new(),
            back: Box::new(LeafBackward),
            is_leaf: true,
            shape: t.shape().to_vec(),
        });
        Value { data: Rc::new(t), node: Some(id) }
    }

    /// Wraps `t` as an untracked constant.
    pub fn constant(&self, t: Tensor) -> Value {
        Value { data: Rc::new(t), node: None }
    }

    /// Central chokepoint for op outputs: checks finiteness, then records
    /// the node if any parent is tracked. The backward builder receives the
    /// output tensor so ops can save it for their VJP.
    pub(crate) fn push(
        &self,
        op: &'static str,
        out: Tensor,
        parents: &[&Value],
        back: impl FnOnce(&Rc<Tensor>) -> Box<dyn Backward>,
    ) -> Result<Value> {
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let out = Rc::new(out);
        let tracked = self.recording && parents.iter().any(|p| p.node.is_some());
        if !tracked {
            return Ok(Value { data: out, node: None });
        }
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            back: back(&out),
            is_leaf: false,
            shape: out.shape().to_vec(),
        });
        Ok(Value { data: out, node: Some(id) })
    }

    /// Reverse sweep from a scalar root. Gradients of every tracked leaf are
    /// accumulated and returned; the tape is consumed in the process.
    pub fn backward(&self, root: &Value) -> Result<Gradients> {
        let root_id = root.node.ok_or(TensorError::UntrackedRoot)?;
        if !root.tensor().is_scalar() {
            return Err(TensorError::NotScalarRoot(root.shape().to_vec()));
        }
        let mut tape = self.tape.borrow_mut();
        if tape.consumed {
            return Err(TensorError::TapeConsumed);
        }
        tape.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..tape.nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(Tensor::full(root.shape(), 1.0));

        for id in (0..=root_id).rev() {
            if grads[id].is_none() || tape.nodes[id].is_leaf {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            let node = &tape.nodes[id];
            let parent_grads = node.back.backward(&g)?;
            if parent_grads.len() != node.parents.len() {
                return Err(TensorError::ShapeMismatch {
                    op: node.back.name(),
                    detail: "backward arity mismatch".into(),
                });
            }
            for (slot, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pid) = slot else { continue };
                if !pg.all_finite() {
                    return Err(TensorError::NonFinite { op: node.back.name() });
                }
                if pg.shape() != tape.nodes[*pid].shape {
                    return Err(TensorError::ShapeMismatch {
                        op: node.back.name(),
                        detail: format!(
                            "gradient shape {:?} vs node shape {:?}",
                            pg.shape(),
                            tape.nodes[*pid].shape
                        ),
                    });
                }
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&pg)?,
                    empty => *empty = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradient map keyed by node id, as produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` was a tracked leaf
    /// on the path to the root.
    pub fn of(&self, v: &Value) -> Option<&Tensor> {
        self.grads.get(v.node_id()?)?.as_ref()
    }

    pub fn of_node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id)?.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_of_squares() {
        // root = sum(x * x), x = [3] -> grad = [6]
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0]).unwrap());
        let sq = g.mul(&x, &x).unwrap();
        let root = g.sum_all(&sq).unwrap();
        let grads = g.backward(&root).unwrap();
        assert_eq!(grads.of(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero() {
        // root = sum(sigmoid(x)), x = [0] -> grad = [0.25]
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0]).unwrap());
        let s = g.sigmoid(&x).unwrap();
        let root = g.sum_all(&s).unwrap();
        let grads = g.backward(&root).unwrap();
        assert!((grads.of(&x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let y = g.mul(&x, &x).unwrap();
        assert!(matches!(g.backward(&y), Err(TensorError::NotScalarRoot(_))));
    }

    #[test]
    fn backward_consumes_tape() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(&x, &x).unwrap();
        g.backward(&y).unwrap();
        assert!(matches!(g.backward(&y), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn untracked_root_is_rejected() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(&x, &x).unwrap();
        assert!(matches!(g.backward(&y), Err(TensorError::UntrackedRoot)));
    }

    #[test]
    fn constants_do_not_record_nodes() {
        let g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        let c = g.add(&a, &b).unwrap();
        assert!(!c.is_tracked());
    }
}
