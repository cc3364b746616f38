//! Object-oriented model composition.
//!
//! A [`Link`] is a parameter-owning network fragment; fragments compose into
//! trees through named children. Parameters and children must be registered
//! inside an init scope obtained during construction; the parameter tree is
//! then traversed depth-first (own parameters before children, registration
//! order within each) for optimization, serialization, and broadcast.

use std::io::{Read, Write};

use crate::autograd::{Result as GradResult, Variable};
use crate::tensor::snapshot::{self, SnapshotError};
use crate::tensor::{DType, Shape, Tensor};
use crate::util;

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("name '{0}' is already registered in this link")]
    DuplicateName(String),
    #[error("initializer: {0}")]
    Init(String),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("snapshot has no record for parameter {0}")]
    MissingPath(String),
    #[error("parameter {path}: snapshot shape {got} does not match {want}")]
    ShapeMismatch { path: String, want: Shape, got: Shape },
    #[error("parameter {path}: snapshot dtype {got} does not match {want}")]
    DTypeMismatch { path: String, want: DType, got: DType },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LinkError>;

/// How a parameter's initial values are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Initializer {
    /// Zero-mean normal with standard deviation sqrt(2 / fan_in), where
    /// fan_in is the second extent of the (out, in) weight shape.
    HeNormal,
    Constant(f64),
}

impl Initializer {
    fn build(self, shape: &Shape, dtype: DType, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Tensor> {
        match self {
            Initializer::Constant(c) => {
                Tensor::full(shape.clone(), dtype, c).map_err(|e| LinkError::Init(e.to_string()))
            }
            Initializer::HeNormal => {
                if shape.rank() < 2 {
                    return Err(LinkError::Init(format!(
                        "HeNormal needs a (out, in) weight shape, got {}",
                        shape
                    )));
                }
                let fan_in = shape.dims()[1];
                let std = (2.0 / fan_in as f64).sqrt();
                let vals: Vec<f64> = (0..shape.len()).map(|_| util::standard_normal(rng) * std).collect();
                let t = Tensor::from_vec(shape.clone(), vals).map_err(|e| LinkError::Init(e.to_string()))?;
                Ok(t.cast(dtype))
            }
        }
    }
}

/// A named leaf variable owned by a link. Cloning shares the variable.
#[derive(Clone)]
pub struct Parameter {
    var: Variable,
    init: Initializer,
}

impl Parameter {
    pub fn new(var: Variable, init: Initializer) -> Parameter {
        Parameter { var, init }
    }

    pub fn variable(&self) -> &Variable {
        &self.var
    }

    pub fn initializer(&self) -> Initializer {
        self.init
    }

    pub fn data(&self) -> Tensor {
        self.var.data()
    }
}

/// Deterministic construction context: a seed plus the path of the link
/// being built, so every parameter draws from its own keyed RNG stream.
pub struct InitCtx {
    seed: u64,
    dtype: DType,
    path: Vec<String>,
}

impl InitCtx {
    pub fn new(seed: u64) -> InitCtx {
        InitCtx {
            seed,
            dtype: DType::F32,
            path: Vec::new(),
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> InitCtx {
        self.dtype = dtype;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Build a child link under `name`, keeping parameter paths aligned with
    /// the registration tree.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut InitCtx) -> T) -> T {
        self.path.push(name.to_string());
        let out = f(self);
        self.path.pop();
        out
    }

    fn rng_for(&self, param: &str) -> rand_chacha::ChaCha8Rng {
        let mut key = String::new();
        for part in &self.path {
            key.push('/');
            key.push_str(part);
        }
        key.push('/');
        key.push_str(param);
        util::rng_for_key(self.seed, &key)
    }
}

/// Registered parameters and children of one link.
#[derive(Default)]
pub struct LinkBody {
    params: Vec<(String, Parameter)>,
    children: Vec<(String, Box<dyn Link>)>,
}

impl LinkBody {
    pub fn new() -> LinkBody {
        LinkBody::default()
    }

    /// Open the registration scope. Only through the scope can parameters
    /// and children be registered.
    pub fn init_scope(&mut self) -> InitScope<'_> {
        InitScope { body: self }
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn child(&self, name: &str) -> Option<&dyn Link> {
        self.children.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_ref())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_children(&self) -> usize {
        self.children.len()
    }

    pub fn child_names(&self) -> impl Iterator<Item = &str> {
        self.children.iter().map(|(n, _)| n.as_str())
    }

    pub(crate) fn params_iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub(crate) fn children_iter(&self) -> impl Iterator<Item = (&str, &dyn Link)> {
        self.children.iter().map(|(n, c)| (n.as_str(), c.as_ref()))
    }
}

/// Registration context handed out by [`LinkBody::init_scope`].
pub struct InitScope<'a> {
    body: &'a mut LinkBody,
}

impl InitScope<'_> {
    fn check_free(&self, name: &str) -> Result<()> {
        if self.body.params.iter().any(|(n, _)| n == name)
            || self.body.children.iter().any(|(n, _)| n == name)
        {
            return Err(LinkError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    /// Create, initialize, and register a parameter.
    pub fn parameter(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        init: Initializer,
        ctx: &InitCtx,
    ) -> Result<Parameter> {
        self.check_free(name)?;
        let shape = shape.into();
        let mut rng = ctx.rng_for(name);
        let data = init.build(&shape, ctx.dtype, &mut rng)?;
        let param = Parameter {
            var: Variable::new(data),
            init,
        };
        self.body.params.push((name.to_string(), param.clone()));
        Ok(param)
    }

    /// Register an already-constructed parameter.
    pub fn register_parameter(&mut self, name: &str, param: Parameter) -> Result<Parameter> {
        self.check_free(name)?;
        self.body.params.push((name.to_string(), param.clone()));
        Ok(param)
    }

    /// Register a child link.
    pub fn child(&mut self, name: &str, link: impl Link + 'static) -> Result<()> {
        self.check_free(name)?;
        self.body.children.push((name.to_string(), Box::new(link)));
        Ok(())
    }
}

/// A parameter-owning network fragment.
pub trait Link {
    fn body(&self) -> &LinkBody;
    fn body_mut(&mut self) -> &mut LinkBody;
    fn forward(&self, x: &Variable) -> GradResult<Variable>;
}

/// Depth-first traversal: own parameters before children, registration
/// order within each; paths are '/'-joined and rooted at '/'.
pub fn namedparams(root: &dyn Link) -> Vec<(String, Parameter)> {
    fn walk(link: &dyn Link, prefix: &str, out: &mut Vec<(String, Parameter)>) {
        for (name, param) in link.body().params_iter() {
            out.push((format!("{}/{}", prefix, name), param.clone()));
        }
        for (name, child) in link.body().children_iter() {
            walk(child, &format!("{}/{}", prefix, name), out);
        }
    }
    let mut out = Vec::new();
    walk(root, "", &mut out);
    out
}

/// The subtree's parameters in traversal order.
pub fn params(root: &dyn Link) -> Vec<Parameter> {
    namedparams(root).into_iter().map(|(_, p)| p).collect()
}

/// Drop every parameter gradient in the subtree.
pub fn cleargrads(root: &dyn Link) {
    for p in params(root) {
        p.variable().cleargrad();
    }
}

/// Write every parameter as a snapshot record.
pub fn save(root: &dyn Link, sink: &mut impl Write) -> Result<()> {
    for (path, param) in namedparams(root) {
        snapshot::write_record(sink, &path, &param.data())?;
    }
    Ok(())
}

/// Snapshot the subtree into a byte vector.
pub fn save_to_vec(root: &dyn Link) -> Vec<u8> {
    let mut buf = Vec::new();
    save(root, &mut buf).expect("writing to memory cannot fail");
    buf
}

/// Load a snapshot produced by [`save`]. Every parameter must be present
/// with matching shape and dtype; the round trip is bit-exact.
pub fn load(root: &dyn Link, source: &mut impl Read) -> Result<()> {
    let records = snapshot::read_all(source)?;
    for (path, param) in namedparams(root) {
        let Some((_, tensor)) = records.iter().find(|(p, _)| p == &path) else {
            return Err(LinkError::MissingPath(path));
        };
        let want = param.variable().shape();
        if tensor.shape() != &want {
            return Err(LinkError::ShapeMismatch {
                path,
                want,
                got: tensor.shape().clone(),
            });
        }
        if tensor.dtype() != param.variable().dtype() {
            return Err(LinkError::DTypeMismatch {
                path,
                want: param.variable().dtype(),
                got: tensor.dtype(),
            });
        }
        param.variable().set_data(tensor.clone());
    }
    Ok(())
}

/// Fully connected layer computing `x @ W.T + b`.
pub struct Linear {
    body: LinkBody,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, ctx: &mut InitCtx) -> Result<Linear> {
        assert!(n_in >= 1 && n_out >= 1, "layer extents must be positive");
        let mut body = LinkBody::new();
        {
            let mut scope = body.init_scope();
            scope.parameter("W", [n_out, n_in], Initializer::HeNormal, ctx)?;
            scope.parameter("b", [n_out], Initializer::Constant(0.0), ctx)?;
        }
        Ok(Linear { body })
    }

    pub fn weight(&self) -> &Parameter {
        self.body.param("W").expect("registered at construction")
    }

    pub fn bias(&self) -> &Parameter {
        self.body.param("b").expect("registered at construction")
    }
}

impl Link for Linear {
    fn body(&self) -> &LinkBody {
        &self.body
    }
    fn body_mut(&mut self) -> &mut LinkBody {
        &mut self.body
    }
    fn forward(&self, x: &Variable) -> GradResult<Variable> {
        crate::ops::linear(x, self.weight().variable(), self.bias().variable())
    }
}

/// Generic composite of named children, applied in registration order.
#[derive(Default)]
pub struct Chain {
    body: LinkBody,
}

impl Chain {
    pub fn new() -> Chain {
        Chain::default()
    }
}

impl Link for Chain {
    fn body(&self) -> &LinkBody {
        &self.body
    }
    fn body_mut(&mut self) -> &mut LinkBody {
        &mut self.body
    }
    fn forward(&self, x: &Variable) -> GradResult<Variable> {
        let mut h = x.clone();
        for (_, child) in self.body.children_iter() {
            h = child.forward(&h)?;
        }
        Ok(h)
    }
}

/// Two-layer perceptron: `l2(relu(l1(x)))`.
pub struct Mlp {
    body: LinkBody,
}

impl Mlp {
    pub fn new(n_in: usize, n_hid: usize, n_out: usize, ctx: &mut InitCtx) -> Result<Mlp> {
        let l1 = ctx.scoped("l1", |c| Linear::new(n_in, n_hid, c))?;
        let l2 = ctx.scoped("l2", |c| Linear::new(n_hid, n_out, c))?;
        let mut body = LinkBody::new();
        {
            let mut scope = body.init_scope();
            scope.child("l1", l1)?;
            scope.child("l2", l2)?;
        }
        Ok(Mlp { body })
    }
}

impl Link for Mlp {
    fn body(&self) -> &LinkBody {
        &self.body
    }
    fn body_mut(&mut self) -> &mut LinkBody {
        &mut self.body
    }
    fn forward(&self, x: &Variable) -> GradResult<Variable> {
        let h = self.body.child("l1").expect("l1").forward(x)?;
        let h = crate::ops::relu(&h)?;
        self.body.child("l2").expect("l2").forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_registers_two_params() {
        let mut ctx = InitCtx::new(0);
        let l = Linear::new(4, 3, &mut ctx).unwrap();
        assert_eq!(l.body().num_params(), 2);
        assert_eq!(l.weight().variable().shape().dims(), &[3, 4]);
        assert_eq!(l.bias().data().to_f64_vec(), vec![0.0; 3]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let ctx = InitCtx::new(0);
        let mut body = LinkBody::new();
        let mut scope = body.init_scope();
        scope.parameter("W", [2, 2], Initializer::Constant(1.0), &ctx).unwrap();
        assert!(matches!(
            scope.parameter("W", [2, 2], Initializer::Constant(1.0), &ctx),
            Err(LinkError::DuplicateName(_))
        ));
    }

    #[test]
    fn construction_outside_scope_is_unregistered() {
        // a Parameter built directly is a plain value until registered
        let p = Parameter::new(
            Variable::new(Tensor::zeros([2], DType::F32)),
            Initializer::Constant(0.0),
        );
        let body = LinkBody::new();
        assert_eq!(body.num_params(), 0);
        drop(p);
    }

    #[test]
    fn he_normal_std_matches_fan_in() {
        // std should be sqrt(2/4) ~ 0.7071; empirical check over 1e5 draws
        // with 5% tolerance.
        let ctx = InitCtx::new(123).with_dtype(DType::F64);
        let mut body = LinkBody::new();
        let p = body
            .init_scope()
            .parameter("W", [25_000, 4], Initializer::HeNormal, &ctx)
            .unwrap();
        let vals = p.data().to_f64_vec();
        assert_eq!(vals.len(), 100_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt();
        let want = (2.0f64 / 4.0).sqrt();
        assert!((std - want).abs() / want < 0.05, "std {} vs {}", std, want);
    }

    #[test]
    fn he_normal_is_reproducible_per_seed() {
        let build = || {
            let mut ctx = InitCtx::new(9).with_dtype(DType::F64);
            Mlp::new(3, 4, 2, &mut ctx).unwrap()
        };
        let a = build();
        let b = build();
        for ((na, pa), (_, pb)) in namedparams(&a).iter().zip(namedparams(&b).iter()) {
            assert_eq!(pa.data().to_le_bytes(), pb.data().to_le_bytes(), "{}", na);
        }
    }

    #[test]
    fn mlp_paths_and_order() {
        let mut ctx = InitCtx::new(0);
        let m = Mlp::new(2, 3, 2, &mut ctx).unwrap();
        let names: Vec<String> = namedparams(&m).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["/l1/W", "/l1/b", "/l2/W", "/l2/b"]);
        assert_eq!(params(&m).len(), 4);
    }

    #[test]
    fn subtree_traversal() {
        let mut ctx = InitCtx::new(0);
        let m = Mlp::new(2, 3, 2, &mut ctx).unwrap();
        let l1 = m.body().child("l1").unwrap();
        assert_eq!(params(l1).len(), 2);
        let empty = Chain::new();
        assert!(namedparams(&empty).is_empty());
    }

    #[test]
    fn mlp_forward_of_zeros_is_output_bias() {
        let mut ctx = InitCtx::new(4).with_dtype(DType::F64);
        let m = Mlp::new(3, 5, 2, &mut ctx).unwrap();
        let x = Variable::new(Tensor::zeros([1, 3], DType::F64));
        let y = m.forward(&x).unwrap();
        // relu(0*W+0) = 0, so the output equals l2's bias (zeros)
        assert_eq!(y.data().to_f64_vec(), vec![0.0, 0.0]);
        assert_eq!(y.shape().dims(), &[1, 2]);
    }

    #[test]
    fn forward_shape_is_batch_by_out() {
        let mut ctx = InitCtx::new(4);
        let m = Mlp::new(3, 5, 2, &mut ctx).unwrap();
        let x = Variable::new(Tensor::zeros([7, 3], DType::F32));
        assert_eq!(m.forward(&x).unwrap().shape().dims(), &[7, 2]);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut ctx = InitCtx::new(11).with_dtype(DType::F64);
        let m = Mlp::new(2, 3, 2, &mut ctx).unwrap();
        let mut buf = Vec::new();
        save(&m, &mut buf).unwrap();

        let mut ctx2 = InitCtx::new(999).with_dtype(DType::F64);
        let m2 = Mlp::new(2, 3, 2, &mut ctx2).unwrap();
        load(&m2, &mut buf.as_slice()).unwrap();
        for ((na, pa), (_, pb)) in namedparams(&m).iter().zip(namedparams(&m2).iter()) {
            assert_eq!(pa.data().to_le_bytes(), pb.data().to_le_bytes(), "{}", na);
        }
    }

    #[test]
    fn load_missing_path_errors() {
        let mut ctx = InitCtx::new(0);
        let small = Linear::new(2, 2, &mut ctx).unwrap();
        let mut buf = Vec::new();
        save(&small, &mut buf).unwrap();
        let big = Mlp::new(2, 2, 2, &mut ctx).unwrap();
        assert!(matches!(load(&big, &mut buf.as_slice()), Err(LinkError::MissingPath(_))));
    }

    #[test]
    fn load_transposed_shape_errors() {
        let mut ctx = InitCtx::new(0);
        let a = Linear::new(2, 3, &mut ctx).unwrap();
        let mut buf = Vec::new();
        save(&a, &mut buf).unwrap();
        let b = Linear::new(3, 2, &mut ctx).unwrap();
        assert!(matches!(load(&b, &mut buf.as_slice()), Err(LinkError::ShapeMismatch { .. })));
    }
}
