//! User-defined elementwise and reduction kernels.
//!
//! A kernel is declared from typed parameter lists and one arithmetic
//! assignment, e.g. inputs `"float32 x, float32 y, float32 z"`, outputs
//! `"float32 w"`, body `"w = x * y + z"`. Generic letters (`T x, T y`)
//! resolve against concrete input dtypes. Compiled kernels are cached and
//! reused; evaluation interprets the AST over broadcast inputs on CPU.

mod parser;

pub use parser::{parse_expr, parse_signature, Assignment, BinOp, Expr, FuncName, ParamDecl, TypeSpec};

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use crate::tensor::{self, DType, ReduceOp, Shape, Tensor, TensorError};

#[derive(Debug, Clone, thiserror::Error)]
pub enum KernelError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unknown type specifier '{text}' at byte {offset}")]
    UnknownType { offset: usize, text: String },
    #[error("identifier '{0}' does not resolve to a declared parameter")]
    UnresolvedIdentifier(String),
    #[error("output parameter '{0}' is never assigned")]
    OutputNeverAssigned(String),
    #[error("assignment target '{0}' is not an output parameter")]
    AssignToNonOutput(String),
    #[error("output parameter '{0}' is read inside the body expression")]
    OutputReadInBody(String),
    #[error("multiple assignments at byte {offset}; a kernel body has exactly one")]
    MultipleAssignments { offset: usize },
    #[error("kernels need at least one input parameter")]
    NoInputs,
    #[error("reduction kernels have exactly one output, got {0}")]
    ReductionOutputs(usize),
    #[error("identity {given} is inconsistent with the {op:?} fold")]
    BadIdentity { op: FoldOp, given: f64 },
    #[error("generic letter '{letter}' bound to both {first} and {second}")]
    GenericConflict { letter: char, first: DType, second: DType },
    #[error("generic letter '{0}' on an output is not bound by any input")]
    UnresolvedGeneric(char),
    #[error("kernel '{name}' expects {expected} inputs, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("input '{param}' declared {expected}, got {got}")]
    DTypeMismatch { param: String, expected: DType, got: DType },
    #[error("inputs mix dtypes {0} and {1}; one kernel invocation uses one dtype")]
    MixedDtypes(DType, DType),
    #[error("kernel '{0}' is generic; resolve it against input dtypes first")]
    StillGeneric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Elementwise kernels map; reduction kernels map then fold.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum KernelKind {
    Elementwise,
    Reduction,
}

/// Binary fold operator of a reduction kernel.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum FoldOp {
    Sum,
    Max,
}

impl FoldOp {
    pub fn identity(self) -> f64 {
        match self {
            FoldOp::Sum => 0.0,
            FoldOp::Max => f64::NEG_INFINITY,
        }
    }
}

/// A compiled (evaluable) kernel.
#[derive(Debug)]
pub struct Kernel {
    pub kind: KernelKind,
    pub name: String,
    pub inputs: Vec<ParamDecl>,
    pub outputs: Vec<ParamDecl>,
    pub body: Assignment,
    pub fold: Option<FoldOp>,
    /// Concrete dtype per generic letter; `None` while the kernel is generic.
    bindings: Option<BTreeMap<char, DType>>,
}

impl Kernel {
    pub fn is_generic(&self) -> bool {
        self.bindings.is_none() && self.inputs.iter().chain(&self.outputs).any(|d| matches!(d.ty, TypeSpec::Generic(_)))
    }

    /// Dtype of a parameter once the kernel is concrete.
    fn param_dtype(&self, decl: &ParamDecl) -> Option<DType> {
        match decl.ty {
            TypeSpec::Concrete(dt) => Some(dt),
            TypeSpec::Generic(c) => self.bindings.as_ref().and_then(|b| b.get(&c).copied()),
        }
    }
}

#[derive(PartialEq, Eq, Hash, Clone)]
struct CacheKey {
    kind: KernelKind,
    signature: String,
    body: String,
    name: String,
    bindings: Option<Vec<(char, DType)>>,
}

#[derive(Default)]
struct CacheState {
    map: HashMap<CacheKey, Arc<Kernel>>,
    hits: u64,
}

fn cache() -> &'static Mutex<CacheState> {
    static CACHE: OnceLock<Mutex<CacheState>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(CacheState::default()))
}

/// Observable cache counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
}

pub fn cache_stats() -> CacheStats {
    let state = cache().lock().unwrap_or_else(|e| e.into_inner());
    CacheStats {
        entries: state.map.len(),
        hits: state.hits,
    }
}

fn signature_key(inputs: &[ParamDecl], outputs: &[ParamDecl]) -> String {
    let ins: Vec<String> = inputs.iter().map(|d| d.to_string()).collect();
    let outs: Vec<String> = outputs.iter().map(|d| d.to_string()).collect();
    format!("{} -> {}", ins.join(", "), outs.join(", "))
}

fn cached(key: CacheKey, build: impl FnOnce() -> Kernel) -> Arc<Kernel> {
    let mut state = cache().lock().unwrap_or_else(|e| e.into_inner());
    if let Some(found) = state.map.get(&key) {
        let found = Arc::clone(found);
        state.hits += 1;
        return found;
    }
    let kernel = Arc::new(build());
    state.map.insert(key, Arc::clone(&kernel));
    kernel
}

fn validate_body(inputs: &[ParamDecl], outputs: &[ParamDecl], body: &Assignment) -> Result<()> {
    if inputs.is_empty() {
        return Err(KernelError::NoInputs);
    }
    let is_input = |name: &str| inputs.iter().any(|d| d.name == name);
    let is_output = |name: &str| outputs.iter().any(|d| d.name == name);
    if !is_output(&body.target) {
        if is_input(&body.target) {
            return Err(KernelError::AssignToNonOutput(body.target.clone()));
        }
        return Err(KernelError::UnresolvedIdentifier(body.target.clone()));
    }
    let mut bad: Option<KernelError> = None;
    body.value.for_each_ident(&mut |name| {
        if bad.is_some() {
            return;
        }
        if is_output(name) {
            bad = Some(KernelError::OutputReadInBody(name.to_string()));
        } else if !is_input(name) {
            bad = Some(KernelError::UnresolvedIdentifier(name.to_string()));
        }
    });
    if let Some(err) = bad {
        return Err(err);
    }
    for out in outputs {
        if out.name != body.target {
            return Err(KernelError::OutputNeverAssigned(out.name.clone()));
        }
    }
    Ok(())
}

fn check_cross_duplicates(inputs: &[ParamDecl], outputs: &[ParamDecl]) -> Result<()> {
    for o in outputs {
        if inputs.iter().any(|i| i.name == o.name) {
            return Err(KernelError::DuplicateParam(o.name.clone()));
        }
    }
    Ok(())
}

/// Compile an elementwise kernel. Identical arguments return the cached
/// instance (observable through [`cache_stats`]).
pub fn compile_elementwise(in_sig: &str, out_sig: &str, expr: &str, name: &str) -> Result<Arc<Kernel>> {
    let inputs = parse_signature(in_sig)?;
    let outputs = parse_signature(out_sig)?;
    check_cross_duplicates(&inputs, &outputs)?;
    let body = parse_expr(expr)?;
    validate_body(&inputs, &outputs, &body)?;
    let key = CacheKey {
        kind: KernelKind::Elementwise,
        signature: signature_key(&inputs, &outputs),
        body: body.to_string(),
        name: name.to_string(),
        bindings: None,
    };
    Ok(cached(key, || Kernel {
        kind: KernelKind::Elementwise,
        name: name.to_string(),
        inputs,
        outputs,
        body,
        fold: None,
        bindings: None,
    }))
}

/// Compile a reduction kernel: map every element with `map_expr`, then fold
/// with `fold_op`. The identity must match the fold operator.
pub fn compile_reduction(
    in_sig: &str,
    out_sig: &str,
    map_expr: &str,
    fold_op: FoldOp,
    identity: f64,
    name: &str,
) -> Result<Arc<Kernel>> {
    let inputs = parse_signature(in_sig)?;
    let outputs = parse_signature(out_sig)?;
    check_cross_duplicates(&inputs, &outputs)?;
    if outputs.len() != 1 {
        return Err(KernelError::ReductionOutputs(outputs.len()));
    }
    let body = parse_expr(map_expr)?;
    validate_body(&inputs, &outputs, &body)?;
    let expected = fold_op.identity();
    if !(identity == expected || (identity.is_nan() && expected.is_nan())) {
        return Err(KernelError::BadIdentity { op: fold_op, given: identity });
    }
    let key = CacheKey {
        kind: KernelKind::Reduction,
        signature: signature_key(&inputs, &outputs),
        body: body.to_string(),
        name: name.to_string(),
        bindings: None,
    };
    Ok(cached(key, || Kernel {
        kind: KernelKind::Reduction,
        name: name.to_string(),
        inputs,
        outputs,
        body,
        fold: Some(fold_op),
        bindings: None,
    }))
}

/// Specialize a kernel's generic letters against concrete input dtypes.
/// Each specialization is cached separately.
pub fn resolve_generic(kernel: &Kernel, dtypes: &[DType]) -> Result<Arc<Kernel>> {
    if dtypes.len() != kernel.inputs.len() {
        return Err(KernelError::Arity {
            name: kernel.name.clone(),
            expected: kernel.inputs.len(),
            got: dtypes.len(),
        });
    }
    let mut bindings: BTreeMap<char, DType> = BTreeMap::new();
    for (decl, &dt) in kernel.inputs.iter().zip(dtypes) {
        match decl.ty {
            TypeSpec::Concrete(want) => {
                if want != dt {
                    return Err(KernelError::DTypeMismatch {
                        param: decl.name.clone(),
                        expected: want,
                        got: dt,
                    });
                }
            }
            TypeSpec::Generic(letter) => {
                if let Some(&bound) = bindings.get(&letter) {
                    if bound != dt {
                        return Err(KernelError::GenericConflict {
                            letter,
                            first: bound,
                            second: dt,
                        });
                    }
                } else {
                    bindings.insert(letter, dt);
                }
            }
        }
    }
    for out in &kernel.outputs {
        if let TypeSpec::Generic(letter) = out.ty {
            if !bindings.contains_key(&letter) {
                return Err(KernelError::UnresolvedGeneric(letter));
            }
        }
    }
    // One invocation runs in one dtype.
    let mut resolved_inputs = Vec::with_capacity(kernel.inputs.len());
    let mut common: Option<DType> = None;
    for (decl, &dt) in kernel.inputs.iter().zip(dtypes) {
        match common {
            None => common = Some(dt),
            Some(c) if c != dt => return Err(KernelError::MixedDtypes(c, dt)),
            _ => {}
        }
        resolved_inputs.push(ParamDecl {
            ty: TypeSpec::Concrete(dt),
            name: decl.name.clone(),
        });
    }
    let resolved_outputs: Vec<ParamDecl> = kernel
        .outputs
        .iter()
        .map(|d| ParamDecl {
            ty: TypeSpec::Concrete(match d.ty {
                TypeSpec::Concrete(dt) => dt,
                TypeSpec::Generic(letter) => bindings[&letter],
            }),
            name: d.name.clone(),
        })
        .collect();
    let key = CacheKey {
        kind: kernel.kind,
        signature: signature_key(&kernel.inputs, &kernel.outputs),
        body: kernel.body.to_string(),
        name: kernel.name.clone(),
        bindings: Some(bindings.iter().map(|(&c, &d)| (c, d)).collect()),
    };
    Ok(cached(key, || Kernel {
        kind: kernel.kind,
        name: kernel.name.clone(),
        inputs: resolved_inputs,
        outputs: resolved_outputs,
        body: kernel.body.clone(),
        fold: kernel.fold,
        bindings: Some(bindings.clone()),
    }))
}

trait KFloat: Copy + PartialOrd {
    fn from_f64(v: f64) -> Self;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    fn neg(self) -> Self;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn maximum(self, o: Self) -> Self;
    fn minimum(self, o: Self) -> Self;
}

macro_rules! impl_kfloat {
    ($t:ty) => {
        impl KFloat for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn add(self, o: Self) -> Self {
                self + o
            }
            fn sub(self, o: Self) -> Self {
                self - o
            }
            fn mul(self, o: Self) -> Self {
                self * o
            }
            fn div(self, o: Self) -> Self {
                self / o
            }
            fn neg(self) -> Self {
                -self
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn maximum(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
            fn minimum(self, o: Self) -> Self {
                <$t>::min(self, o)
            }
        }
    };
}

impl_kfloat!(f32);
impl_kfloat!(f64);

fn eval_expr<T: KFloat>(expr: &Expr, names: &[&str], env: &[T]) -> T {
    match expr {
        Expr::Lit(v) => T::from_f64(*v),
        Expr::Ident(name) => {
            let idx = names.iter().position(|n| n == name).expect("validated identifier");
            env[idx]
        }
        Expr::Neg(inner) => eval_expr(inner, names, env).neg(),
        Expr::Bin(op, lhs, rhs) => {
            let a = eval_expr(lhs, names, env);
            let b = eval_expr(rhs, names, env);
            match op {
                BinOp::Add => a.add(b),
                BinOp::Sub => a.sub(b),
                BinOp::Mul => a.mul(b),
                BinOp::Div => a.div(b),
            }
        }
        Expr::Call(func, args) => {
            let a = eval_expr(&args[0], names, env);
            match func {
                FuncName::Abs => a.abs(),
                FuncName::Exp => a.exp(),
                FuncName::Log => a.ln(),
                FuncName::Tanh => a.tanh(),
                FuncName::Min => a.minimum(eval_expr(&args[1], names, env)),
                FuncName::Max => a.maximum(eval_expr(&args[1], names, env)),
            }
        }
    }
}

fn map_typed<T: KFloat>(kernel: &Kernel, values: Vec<Vec<T>>, shape: &Shape, strides: &[Vec<usize>]) -> Vec<T> {
    let names: Vec<&str> = kernel.inputs.iter().map(|d| d.name.as_str()).collect();
    let mut env: Vec<T> = vec![T::from_f64(0.0); values.len()];
    let mut out = Vec::with_capacity(shape.len());
    tensor::for_each_offset(shape, strides, |_, offs| {
        for (slot, (vals, &off)) in env.iter_mut().zip(values.iter().zip(offs)) {
            *slot = vals[off];
        }
        out.push(eval_expr(&kernel.body.value, &names, &env));
    });
    out
}

/// Resolve (if generic), broadcast the inputs, and evaluate the map body,
/// returning the mapped tensor. For elementwise kernels this is the result.
fn eval_map(kernel: &Kernel, inputs: &[Tensor]) -> Result<Tensor> {
    if inputs.len() != kernel.inputs.len() {
        return Err(KernelError::Arity {
            name: kernel.name.clone(),
            expected: kernel.inputs.len(),
            got: inputs.len(),
        });
    }
    let dtypes: Vec<DType> = inputs.iter().map(|t| t.dtype()).collect();
    let resolved;
    let kernel = if kernel.is_generic() {
        resolved = resolve_generic(kernel, &dtypes)?;
        &*resolved
    } else {
        // Concrete kernels still get arity/dtype validation.
        for (decl, &dt) in kernel.inputs.iter().zip(&dtypes) {
            let want = kernel.param_dtype(decl).ok_or(KernelError::StillGeneric(kernel.name.clone()))?;
            if want != dt {
                return Err(KernelError::DTypeMismatch {
                    param: decl.name.clone(),
                    expected: want,
                    got: dt,
                });
            }
        }
        kernel
    };
    let mut shape = inputs[0].shape().clone();
    for t in &inputs[1..] {
        shape = Shape::broadcast(&shape, t.shape())?;
    }
    let strides: Vec<Vec<usize>> = inputs.iter().map(|t| tensor::broadcast_strides(t.shape(), &shape)).collect();
    let out_dtype = kernel.param_dtype(&kernel.outputs[0]).expect("concrete after resolution");
    let out = match out_dtype {
        DType::F32 => {
            let values: Vec<Vec<f32>> = inputs
                .iter()
                .map(|t| match t.values() {
                    tensor::SliceRef::F32(v) => v.to_vec(),
                    tensor::SliceRef::F64(v) => v.iter().map(|&x| x as f32).collect(),
                })
                .collect();
            Tensor::from_vec_f32(shape.clone(), map_typed(kernel, values, &shape, &strides))?
        }
        DType::F64 => {
            let values: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_f64_vec()).collect();
            Tensor::from_vec(shape.clone(), map_typed(kernel, values, &shape, &strides))?
        }
    };
    Ok(out)
}

/// Evaluate an elementwise kernel over broadcast inputs.
pub fn eval_elementwise(kernel: &Kernel, inputs: &[Tensor]) -> Result<Tensor> {
    debug_assert_eq!(kernel.kind, KernelKind::Elementwise);
    eval_map(kernel, inputs)
}

/// Evaluate a reduction kernel: map, then fold along `axes`
/// (all axes when `None`). Folding an empty extent yields the identity.
pub fn eval_reduction(kernel: &Kernel, inputs: &[Tensor], axes: Option<&[usize]>, keepdims: bool) -> Result<Tensor> {
    debug_assert_eq!(kernel.kind, KernelKind::Reduction);
    let mapped = eval_map(kernel, inputs)?;
    let fold = kernel.fold.expect("reduction kernel carries a fold");
    let op = match fold {
        FoldOp::Sum => ReduceOp::Sum,
        FoldOp::Max => ReduceOp::Max,
    };
    let all_axes: Vec<usize>;
    let axes = match axes {
        Some(a) => a,
        None => {
            all_axes = (0..mapped.shape().rank()).collect();
            &all_axes
        }
    };
    Ok(tensor::reduce(op, &mapped, axes, keepdims)?)
}
