//! The backward driver.
//!
//! Candidates are function nodes ordered by descending rank (ties broken by
//! insertion order), which realizes the topological order of the recorded
//! graph: every consumer of a node is processed before the node's creator,
//! so each node's gradient is final when it is consumed. Unless a
//! second-order graph is being recorded, each function node's input edges
//! and retained backups are severed immediately after it is processed, and
//! gradient map entries are dropped as soon as their last consumer ran.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::{set_recording, FuncRef, GradError, NodeRef, OpContext, Result, Variable};
use crate::tensor::{registry, Tensor};

/// Flags and hooks for one backward run.
#[derive(Default)]
pub struct BackwardOptions<'a> {
    /// Record the gradient computations so they can be differentiated again.
    pub create_graph: bool,
    /// Store gradients on intermediate (non-leaf) variables too.
    pub retain_intermediate_grads: bool,
    /// Called after each function node is processed and severed.
    pub observer: Option<&'a mut dyn FnMut(&BackwardStep<'_>)>,
}

impl BackwardOptions<'_> {
    pub fn create_graph(mut self, on: bool) -> Self {
        self.create_graph = on;
        self
    }

    pub fn retain_intermediate_grads(mut self, on: bool) -> Self {
        self.retain_intermediate_grads = on;
        self
    }
}

/// Snapshot passed to the observer after one node is processed.
pub struct BackwardStep<'a> {
    pub op_name: &'a str,
    /// Registry live-buffer count after this node was severed.
    pub live_buffers: usize,
    /// Gradient-map entries for non-leaf nodes after this step.
    pub live_intermediate_grads: usize,
}

/// Counters from one backward run.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardStats {
    /// Function nodes processed.
    pub processed: usize,
    /// Maximum number of simultaneously held intermediate gradients.
    pub max_live_intermediate_grads: usize,
}

struct Candidate {
    rank: usize,
    seq: u64,
    func: FuncRef,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.rank == other.rank && self.seq == other.seq
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: highest rank first, then earliest insertion.
        self.rank.cmp(&other.rank).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct GradEntry {
    node: NodeRef,
    grad: Variable,
}

struct Driver<'a> {
    grads: HashMap<u64, GradEntry>,
    heap: BinaryHeap<Candidate>,
    seen: HashSet<u64>,
    /// Node ids whose seed came from the variable's own grad slot; their
    /// final deposit replaces instead of accumulating.
    seeded_from_var: HashSet<u64>,
    /// Node ids whose gradients a `grad()` caller asked for.
    keep: HashSet<u64>,
    next_seq: u64,
    stats: BackwardStats,
    opts: BackwardOptions<'a>,
}

impl Driver<'_> {
    fn enqueue(&mut self, func: FuncRef) {
        if self.seen.contains(&func.id()) {
            return;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Candidate {
            rank: func.rank(),
            seq,
            func,
        });
    }

    fn accumulate(&mut self, node: NodeRef, gx: Variable) -> Result<()> {
        let id = node.id();
        if let Some(entry) = self.grads.get_mut(&id) {
            let summed = crate::ops::add(&entry.grad, &gx)?;
            entry.grad = summed;
        } else {
            self.grads.insert(id, GradEntry { node, grad: gx });
        }
        Ok(())
    }

    fn live_intermediate(&self) -> usize {
        self.grads.values().filter(|e| !e.node.is_leaf()).count()
    }

    fn deposit(&self, var: &Variable, grad: Variable, node_id: u64) -> Result<()> {
        if self.seeded_from_var.contains(&node_id) {
            var.set_grad(Some(grad));
            return Ok(());
        }
        let merged = match var.grad() {
            None => grad,
            Some(old) => crate::ops::add(&old, &grad)?,
        };
        var.set_grad(Some(merged));
        Ok(())
    }

    fn run(&mut self, store_to_vars: bool) -> Result<()> {
        while let Some(candidate) = self.heap.pop() {
            let func = candidate.func;
            if !self.seen.insert(func.id()) {
                continue;
            }
            let gys: Vec<Option<Variable>> = func
                .outputs
                .borrow()
                .iter()
                .map(|slot| {
                    slot.node
                        .upgrade()
                        .and_then(|n| self.grads.get(&n.id()).map(|e| e.grad.clone()))
                })
                .collect();
            let gxs = {
                let ctx = OpContext::new(&func);
                func.op.backward(&ctx, &gys)?
            };
            // the consumed output gradients must not outlive this step
            drop(gys);
            let input_nodes: Vec<NodeRef> = func.inputs.borrow().clone();
            if gxs.len() != input_nodes.len() {
                return Err(GradError::GradientCount {
                    op: func.name(),
                    want: input_nodes.len(),
                    got: gxs.len(),
                });
            }
            for (i, gx) in gxs.into_iter().enumerate() {
                let Some(gx) = gx else { continue };
                let (want_shape, want_dtype) = &func.input_meta[i];
                if &gx.shape() != want_shape {
                    return Err(GradError::GradientShape {
                        op: func.name(),
                        index: i,
                        want: want_shape.clone(),
                        got: gx.shape(),
                    });
                }
                debug_assert_eq!(gx.dtype(), *want_dtype, "op '{}' changed gradient dtype", func.name());
                let node = input_nodes[i].clone();
                let creator = node.creator();
                self.accumulate(node, gx)?;
                if let Some(creator) = creator {
                    self.enqueue(creator);
                }
            }
            // Both the consumed output gradients and the new input gradients
            // are live at this point; record the high-water mark.
            self.stats.max_live_intermediate_grads =
                self.stats.max_live_intermediate_grads.max(self.live_intermediate());
            // Output gradients were consumed by this node; drop them unless
            // a grad() caller asked for them.
            for slot in func.outputs.borrow().iter() {
                let Some(node) = slot.node.upgrade() else { continue };
                if self.keep.contains(&node.id()) {
                    continue;
                }
                let Some(entry) = self.grads.remove(&node.id()) else { continue };
                if store_to_vars && self.opts.retain_intermediate_grads {
                    if let Some(inner) = node.owner.borrow().upgrade() {
                        let var = Variable { inner };
                        self.deposit(&var, entry.grad, node.id())?;
                    }
                }
            }
            if !self.opts.create_graph {
                func.sever();
            }
            self.stats.processed += 1;
            let live_intermediate_grads = self.live_intermediate();
            if let Some(observer) = self.opts.observer.as_deref_mut() {
                let step = BackwardStep {
                    op_name: func.name(),
                    live_buffers: registry::live_buffers(),
                    live_intermediate_grads,
                };
                observer(&step);
            }
        }
        Ok(())
    }
}

pub(crate) fn run_backward(
    seeds: Vec<(Variable, Variable)>,
    seeded_from_var: HashSet<u64>,
    requested: Option<&[Variable]>,
    opts: BackwardOptions<'_>,
) -> Result<(Vec<Variable>, BackwardStats)> {
    let _record = set_recording(opts.create_graph);
    let store_to_vars = requested.is_none();
    let mut driver = Driver {
        grads: HashMap::new(),
        heap: BinaryHeap::new(),
        seen: HashSet::new(),
        seeded_from_var,
        keep: requested
            .map(|vars| vars.iter().map(|v| v.node().id()).collect())
            .unwrap_or_default(),
        next_seq: 0,
        stats: BackwardStats::default(),
        opts,
    };
    for (v, g) in &seeds {
        if g.shape() != v.shape() {
            return Err(GradError::SeedShape {
                want: v.shape(),
                got: g.shape(),
            });
        }
        let creator = v.creator();
        driver.accumulate(v.node().clone(), g.clone())?;
        if let Some(creator) = creator {
            driver.enqueue(creator);
        }
    }
    driver.run(store_to_vars)?;
    if store_to_vars {
        // Populate every reachable leaf's grad slot.
        let entries: Vec<(u64, NodeRef, Variable)> = driver
            .grads
            .iter()
            .filter(|(_, e)| e.node.is_leaf())
            .map(|(&id, e)| (id, e.node.clone(), e.grad.clone()))
            .collect();
        for (id, node, grad) in entries {
            if let Some(inner) = node.owner.borrow().upgrade() {
                let var = Variable { inner };
                driver.deposit(&var, grad, id)?;
            }
        }
        Ok((Vec::new(), driver.stats))
    } else {
        let requested = requested.expect("grad mode has requested inputs");
        let mut out = Vec::with_capacity(requested.len());
        for v in requested {
            match driver.grads.get(&v.node().id()) {
                Some(entry) => out.push(entry.grad.clone()),
                None => out.push(Variable::new(Tensor::zeros(v.shape(), v.dtype()))),
            }
        }
        Ok((out, driver.stats))
    }
}

pub(crate) fn backward_into_variables(v: &Variable, opts: BackwardOptions<'_>) -> Result<BackwardStats> {
    let mut seeded = HashSet::new();
    let seed = match v.grad() {
        Some(g) => {
            seeded.insert(v.node().id());
            g
        }
        None => {
            if v.shape().rank() != 0 {
                return Err(GradError::NonScalarSeed);
            }
            Variable::new(Tensor::ones(v.shape(), v.dtype()))
        }
    };
    run_backward(vec![(v.clone(), seed)], seeded, None, opts).map(|(_, stats)| stats)
}

/// Gradients of `outputs` with respect to `inputs`, returned positionally.
/// Nothing is stored on any variable. Inputs unreachable from the outputs
/// get zero gradients. With `create_graph` the returned gradients carry
/// their own recorded graphs and can be differentiated again.
pub fn grad(
    outputs: &[Variable],
    inputs: &[Variable],
    grad_outputs: Option<&[Variable]>,
    create_graph: bool,
) -> Result<Vec<Variable>> {
    grad_ext(
        outputs,
        inputs,
        grad_outputs,
        BackwardOptions {
            create_graph,
            ..BackwardOptions::default()
        },
    )
    .map(|(grads, _)| grads)
}

/// [`grad`] with full options and run statistics.
pub fn grad_ext(
    outputs: &[Variable],
    inputs: &[Variable],
    grad_outputs: Option<&[Variable]>,
    opts: BackwardOptions<'_>,
) -> Result<(Vec<Variable>, BackwardStats)> {
    let seeds: Vec<(Variable, Variable)> = match grad_outputs {
        Some(gs) => {
            if gs.len() != outputs.len() {
                return Err(GradError::SeedCount {
                    want: outputs.len(),
                    got: gs.len(),
                });
            }
            outputs.iter().cloned().zip(gs.iter().cloned()).collect()
        }
        None => {
            let mut seeds = Vec::with_capacity(outputs.len());
            for v in outputs {
                if v.shape().rank() != 0 {
                    return Err(GradError::NonScalarSeed);
                }
                seeds.push((v.clone(), Variable::new(Tensor::ones(v.shape(), v.dtype()))));
            }
            seeds
        }
    };
    run_backward(seeds, HashSet::new(), Some(inputs), opts)
}
