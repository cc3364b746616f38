//! The define-by-run graph engine.
//!
//! Applying a differentiable operation to [`Variable`]s records a
//! [`FunctionNode`] while the forward computation runs; gradients are
//! obtained later by backtracking the recorded nodes in topological order.
//!
//! Two objects represent each value. The `Variable` is the user-facing
//! handle and owns the array data; the [`VariableNode`] is the graph-side
//! node and holds array data only when some operation declared it retained.
//! Dropping the last user handle therefore frees a buffer that no operation
//! needs for backward, while the graph structure itself stays intact.
//!
//! Function nodes hold strong edges to their input nodes and weak edges to
//! their output nodes, so a recorded graph can never form a reference
//! cycle. Retained outputs are backed up on the function node and replayed
//! as fresh nodes if backward runs after the user dropped them.

mod backward;

pub use backward::{grad, grad_ext, BackwardOptions, BackwardStats, BackwardStep};

use std::cell::{Cell, RefCell};
use std::rc::{Rc, Weak};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{DType, Shape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("operation '{op}': {message}")]
    Forward { op: &'static str, message: String },
    #[error("operation '{op}' pulled input {index} without declaring it retained")]
    InputRetentionContract { op: &'static str, index: usize },
    #[error("operation '{op}' pulled output {index} without declaring it retained")]
    OutputRetentionContract { op: &'static str, index: usize },
    #[error("operation '{op}' declares retained {kind} {index}, but only {count} exist")]
    RetentionIndex {
        op: &'static str,
        kind: &'static str,
        index: usize,
        count: usize,
    },
    #[error("backward of a non-scalar output requires an explicit seed gradient")]
    NonScalarSeed,
    #[error("seed gradient has shape {got}, output has shape {want}")]
    SeedShape { want: Shape, got: Shape },
    #[error("seed count {got} does not match output count {want}")]
    SeedCount { want: usize, got: usize },
    #[error("operation '{op}' produced input gradient {index} with shape {got}, expected {want}")]
    GradientShape {
        op: &'static str,
        index: usize,
        want: Shape,
        got: Shape,
    },
    #[error("operation '{op}' returned {got} input gradients for {want} inputs")]
    GradientCount { op: &'static str, want: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, GradError>;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_FUNC_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// True while function applications are being recorded into a graph.
pub fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

/// RAII switch for graph recording; restores the previous state on drop.
pub struct RecordGuard {
    prev: bool,
}

pub fn set_recording(on: bool) -> RecordGuard {
    let prev = RECORDING.with(|r| r.replace(on));
    RecordGuard { prev }
}

/// Run forward computations without recording a graph.
pub fn no_recording() -> RecordGuard {
    set_recording(false)
}

impl Drop for RecordGuard {
    fn drop(&mut self) {
        RECORDING.with(|r| r.set(self.prev));
    }
}

/// A differentiable operation. `forward` works on raw tensors; `backward`
/// is expressed over [`Variable`]s so that gradient computations can be
/// recorded and differentiated again.
pub trait Op {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;

    /// Per-output gradients in, per-input gradients out. `None` entries mean
    /// "no contribution" (treated as zero).
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>>;

    /// Input indices whose arrays backward will pull.
    fn retained_inputs(&self) -> &'static [usize] {
        &[]
    }

    /// Output indices whose arrays backward will pull.
    fn retained_outputs(&self) -> &'static [usize] {
        &[]
    }
}

pub type NodeRef = Rc<VariableNode>;
pub type FuncRef = Rc<FunctionNode>;

/// Graph-side representation of a variable.
pub struct VariableNode {
    id: u64,
    rank: usize,
    shape: Shape,
    dtype: DType,
    creator: Option<FuncRef>,
    /// Array data, present only while some operation retains this variable
    /// as an input. Released when the last retaining operation is severed.
    retained: RefCell<Option<Tensor>>,
    retain_count: Cell<usize>,
    owner: RefCell<Weak<VarInner>>,
}

impl VariableNode {
    fn new(rank: usize, shape: Shape, dtype: DType, creator: Option<FuncRef>) -> NodeRef {
        Rc::new(VariableNode {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            rank,
            shape,
            dtype,
            creator,
            retained: RefCell::new(None),
            retain_count: Cell::new(0),
            owner: RefCell::new(Weak::new()),
        })
    }

    fn retain(&self, data: Tensor) {
        *self.retained.borrow_mut() = Some(data);
        self.retain_count.set(self.retain_count.get() + 1);
    }

    fn release_retained(&self) {
        let count = self.retain_count.get();
        debug_assert!(count > 0, "release without matching retain");
        self.retain_count.set(count - 1);
        if count == 1 {
            *self.retained.borrow_mut() = None;
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn creator(&self) -> Option<FuncRef> {
        self.creator.clone()
    }

    pub fn is_leaf(&self) -> bool {
        self.creator.is_none()
    }

    /// Whether this node currently holds retained input data.
    pub fn has_retained_data(&self) -> bool {
        self.retained.borrow().is_some()
    }
}

struct OutputSlot {
    node: Weak<VariableNode>,
    /// Backup of the output array, present for retained output indices.
    backup: Option<Tensor>,
    shape: Shape,
    dtype: DType,
}

/// A recorded application of an [`Op`].
pub struct FunctionNode {
    id: u64,
    rank: usize,
    op: Box<dyn Op>,
    inputs: RefCell<Vec<NodeRef>>,
    input_meta: Vec<(Shape, DType)>,
    outputs: RefCell<Vec<OutputSlot>>,
    retained_inputs: &'static [usize],
    retained_outputs: &'static [usize],
}

impl FunctionNode {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &'static str {
        self.op.name()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_inputs(&self) -> usize {
        self.input_meta.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.borrow().len()
    }

    /// True once the backward driver removed this node's input edges and
    /// output backups.
    pub fn is_severed(&self) -> bool {
        self.inputs.borrow().is_empty() && self.num_inputs() > 0
    }

    fn sever(&self) {
        let inputs = self.inputs.borrow();
        if !inputs.is_empty() {
            for &i in self.retained_inputs {
                inputs[i].release_retained();
            }
        }
        drop(inputs);
        self.inputs.borrow_mut().clear();
        for slot in self.outputs.borrow_mut().iter_mut() {
            slot.backup = None;
        }
    }

    /// Variable for a retained output. If the original output node is alive
    /// it is reused; otherwise a fresh node is created from the backup data
    /// and wired as if it were the original output.
    pub fn retrieve_retained_output(self: &Rc<Self>, index: usize) -> Result<Variable> {
        if !self.retained_outputs.contains(&index) {
            return Err(GradError::OutputRetentionContract {
                op: self.op.name(),
                index,
            });
        }
        let mut outputs = self.outputs.borrow_mut();
        let slot = &mut outputs[index];
        if let Some(node) = slot.node.upgrade() {
            if let Some(inner) = node.owner.borrow().upgrade() {
                return Ok(Variable { inner });
            }
            let data = slot
                .backup
                .clone()
                .expect("retained output backup present until severed");
            return Ok(Variable::attach(node, data));
        }
        // Replay: recreate the released output node.
        let data = slot
            .backup
            .clone()
            .expect("retained output backup present until severed");
        let node = VariableNode::new(self.rank + 1, slot.shape.clone(), slot.dtype, Some(Rc::clone(self)));
        slot.node = Rc::downgrade(&node);
        Ok(Variable::attach(node, data))
    }
}

/// Access to a function node's recorded state during backward.
pub struct OpContext<'a> {
    func: &'a FuncRef,
}

impl<'a> OpContext<'a> {
    pub(crate) fn new(func: &'a FuncRef) -> Self {
        OpContext { func }
    }

    pub fn num_inputs(&self) -> usize {
        self.func.num_inputs()
    }

    pub fn num_outputs(&self) -> usize {
        self.func.num_outputs()
    }

    pub fn input_shape(&self, index: usize) -> &Shape {
        &self.func.input_meta[index].0
    }

    pub fn input_dtype(&self, index: usize) -> DType {
        self.func.input_meta[index].1
    }

    /// Pull a retained input as a Variable. Errors if the operation did not
    /// declare the index retained.
    pub fn input(&self, index: usize) -> Result<Variable> {
        if !self.func.retained_inputs.contains(&index) {
            return Err(GradError::InputRetentionContract {
                op: self.func.op.name(),
                index,
            });
        }
        let node = self.func.inputs.borrow()[index].clone();
        if let Some(inner) = node.owner.borrow().upgrade() {
            return Ok(Variable { inner });
        }
        let data = node
            .retained
            .borrow()
            .clone()
            .expect("retained input data present while the node lives");
        Ok(Variable::attach(node, data))
    }

    /// Pull a retained output as a Variable, replaying its node if the user
    /// handle was dropped.
    pub fn output(&self, index: usize) -> Result<Variable> {
        self.func.retrieve_retained_output(index)
    }
}

pub(crate) struct VarInner {
    data: RefCell<Tensor>,
    grad: RefCell<Option<Variable>>,
    node: NodeRef,
}

/// User-facing differentiable value. Cloning is cheap and yields another
/// handle to the same value (and gradient slot).
#[derive(Clone)]
pub struct Variable {
    inner: Rc<VarInner>,
}

impl Variable {
    /// A leaf variable with no creator, rank 0.
    pub fn new(data: Tensor) -> Variable {
        let node = VariableNode::new(0, data.shape().clone(), data.dtype(), None);
        Variable::wrap(node, data)
    }

    fn wrap(node: NodeRef, data: Tensor) -> Variable {
        let inner = Rc::new(VarInner {
            data: RefCell::new(data),
            grad: RefCell::new(None),
            node,
        });
        *inner.node.owner.borrow_mut() = Rc::downgrade(&inner);
        Variable { inner }
    }

    /// Wrap an existing graph node with (backup or retained) data.
    fn attach(node: NodeRef, data: Tensor) -> Variable {
        Variable::wrap(node, data)
    }

    /// The array data (a cheap buffer-sharing handle).
    pub fn data(&self) -> Tensor {
        self.inner.data.borrow().clone()
    }

    /// Replace the array data in place. Shape and dtype must match.
    pub fn set_data(&self, data: Tensor) {
        assert_eq!(data.shape(), &self.inner.node.shape, "set_data changes shape");
        assert_eq!(data.dtype(), self.inner.node.dtype, "set_data changes dtype");
        *self.inner.data.borrow_mut() = data;
    }

    /// Mutate the data tensor in place (parameter updates).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut Tensor) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    pub fn shape(&self) -> Shape {
        self.inner.node.shape.clone()
    }

    pub fn dtype(&self) -> DType {
        self.inner.node.dtype
    }

    pub fn len(&self) -> usize {
        self.inner.node.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.inner.data.borrow().item()
    }

    pub fn grad(&self) -> Option<Variable> {
        self.inner.grad.borrow().clone()
    }

    pub fn set_grad(&self, grad: Option<Variable>) {
        *self.inner.grad.borrow_mut() = grad;
    }

    /// Drop the gradient link so its buffers become reclaimable.
    pub fn cleargrad(&self) {
        self.set_grad(None);
    }

    pub fn node(&self) -> &NodeRef {
        &self.inner.node
    }

    pub fn creator(&self) -> Option<FuncRef> {
        self.inner.node.creator()
    }

    pub fn rank(&self) -> usize {
        self.inner.node.rank
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_leaf()
    }

    /// True if both handles refer to the same graph node.
    pub fn same_node(&self, other: &Variable) -> bool {
        Rc::ptr_eq(&self.inner.node, &other.inner.node)
    }

    /// True if both handles refer to the same value slot.
    pub fn same_variable(&self, other: &Variable) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Backtrack the graph from this output, storing gradients on every
    /// reachable leaf variable. Default flags: no second-order graph, no
    /// intermediate gradients.
    pub fn backward(&self) -> Result<BackwardStats> {
        self.backward_with(BackwardOptions::default())
    }

    pub fn backward_with(&self, opts: BackwardOptions<'_>) -> Result<BackwardStats> {
        backward::backward_into_variables(self, opts)
    }
}

impl std::fmt::Debug for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Variable<{}, {}, rank {}>",
            self.dtype(),
            self.inner.node.shape,
            self.inner.node.rank
        )
    }
}

/// Run `op` forward on `inputs`, recording a function node (when recording
/// is enabled) and honoring the operation's retention declarations.
pub fn apply(op: Box<dyn Op>, inputs: &[&Variable]) -> Result<Vec<Variable>> {
    let xs: Vec<Tensor> = inputs.iter().map(|v| v.data()).collect();
    let ys = op.forward(&xs)?;
    if !is_recording() {
        return Ok(ys.into_iter().map(Variable::new).collect());
    }
    for &i in op.retained_inputs() {
        if i >= inputs.len() {
            return Err(GradError::RetentionIndex {
                op: op.name(),
                kind: "input",
                index: i,
                count: inputs.len(),
            });
        }
    }
    for &i in op.retained_outputs() {
        if i >= ys.len() {
            return Err(GradError::RetentionIndex {
                op: op.name(),
                kind: "output",
                index: i,
                count: ys.len(),
            });
        }
    }
    let rank = inputs.iter().map(|v| v.inner.node.rank).max().unwrap_or(0);
    let retained_inputs = op.retained_inputs();
    let retained_outputs = op.retained_outputs();
    let func = Rc::new(FunctionNode {
        id: NEXT_FUNC_ID.fetch_add(1, Ordering::Relaxed),
        rank,
        op,
        inputs: RefCell::new(inputs.iter().map(|v| Rc::clone(&v.inner.node)).collect()),
        input_meta: xs.iter().map(|t| (t.shape().clone(), t.dtype())).collect(),
        outputs: RefCell::new(Vec::with_capacity(ys.len())),
        retained_inputs,
        retained_outputs,
    });
    for &i in retained_inputs {
        inputs[i].inner.node.retain(xs[i].clone());
    }
    let mut out_vars = Vec::with_capacity(ys.len());
    {
        let mut slots = func.outputs.borrow_mut();
        for (j, y) in ys.into_iter().enumerate() {
            let node = VariableNode::new(rank + 1, y.shape().clone(), y.dtype(), Some(Rc::clone(&func)));
            slots.push(OutputSlot {
                node: Rc::downgrade(&node),
                backup: retained_outputs.contains(&j).then(|| y.clone()),
                shape: y.shape().clone(),
                dtype: y.dtype(),
            });
            out_vars.push(Variable::wrap(node, y));
        }
    }
    Ok(out_vars)
}

/// Apply an operation with exactly one output.
pub fn apply_single(op: Box<dyn Op>, inputs: &[&Variable]) -> Result<Variable> {
    let mut out = apply(op, inputs)?;
    debug_assert_eq!(out.len(), 1);
    Ok(out.pop().expect("single-output op"))
}
