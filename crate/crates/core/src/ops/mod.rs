//! Catalog of differentiable operations.
//!
//! Each operation declares exactly which inputs/outputs its backward needs
//! (the engine enforces the declaration) and implements backward over
//! differentiable primitives, so gradient computations can themselves be
//! recorded and differentiated.

pub mod gradcheck;

use crate::autograd::{apply_single, GradError, Op, OpContext, Result, Variable};
use crate::tensor::{self, DType, EwiseOp, ReduceOp, Shape, Tensor};

fn fwd_err(op: &'static str, message: impl Into<String>) -> GradError {
    GradError::Forward {
        op,
        message: message.into(),
    }
}

/// A constant leaf wrapping `t`.
pub fn constant(t: Tensor) -> Variable {
    Variable::new(t)
}

/// Rank-0 constant with the same dtype as `v`.
pub fn scalar_like(v: &Variable, value: f64) -> Variable {
    Variable::new(match v.dtype() {
        DType::F32 => Tensor::scalar_f32(value as f32),
        DType::F64 => Tensor::scalar(value),
    })
}

/// Sum `g` down to `shape` when broadcasting stretched it; identity otherwise.
fn reduce_like(g: &Variable, shape: &Shape) -> Result<Variable> {
    if &g.shape() == shape {
        Ok(g.clone())
    } else {
        sum_to(g, shape.clone())
    }
}

/// Cast the gradient to the input's dtype (mixed-precision graphs).
fn match_dtype(g: Variable, dtype: DType) -> Result<Variable> {
    if g.dtype() == dtype {
        Ok(g)
    } else {
        cast(&g, dtype)
    }
}

fn only(grads: &[Option<Variable>]) -> Option<Variable> {
    grads[0].clone()
}

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

struct Add;

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![tensor::ewise(EwiseOp::Add, &xs[0], &xs[1])?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None, None]) };
        let ga = match_dtype(reduce_like(&g, ctx.input_shape(0))?, ctx.input_dtype(0))?;
        let gb = match_dtype(reduce_like(&g, ctx.input_shape(1))?, ctx.input_dtype(1))?;
        Ok(vec![Some(ga), Some(gb)])
    }
}

pub fn add(a: &Variable, b: &Variable) -> Result<Variable> {
    apply_single(Box::new(Add), &[a, b])
}

struct Neg;

impl Op for Neg {
    fn name(&self) -> &'static str {
        "neg"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].map(|v| -v)])
    }
    fn backward(&self, _ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        match only(grads) {
            Some(g) => Ok(vec![Some(neg(&g)?)]),
            None => Ok(vec![None]),
        }
    }
}

pub fn neg(x: &Variable) -> Result<Variable> {
    apply_single(Box::new(Neg), &[x])
}

struct Sub;

impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![tensor::ewise(EwiseOp::Sub, &xs[0], &xs[1])?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None, None]) };
        let ga = match_dtype(reduce_like(&g, ctx.input_shape(0))?, ctx.input_dtype(0))?;
        let gb = match_dtype(reduce_like(&neg(&g)?, ctx.input_shape(1))?, ctx.input_dtype(1))?;
        Ok(vec![Some(ga), Some(gb)])
    }
}

pub fn sub(a: &Variable, b: &Variable) -> Result<Variable> {
    apply_single(Box::new(Sub), &[a, b])
}

struct Mul;

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![tensor::ewise(EwiseOp::Mul, &xs[0], &xs[1])?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None, None]) };
        let a = ctx.input(0)?;
        let b = ctx.input(1)?;
        let ga = match_dtype(reduce_like(&mul(&g, &b)?, ctx.input_shape(0))?, ctx.input_dtype(0))?;
        let gb = match_dtype(reduce_like(&mul(&g, &a)?, ctx.input_shape(1))?, ctx.input_dtype(1))?;
        Ok(vec![Some(ga), Some(gb)])
    }
    fn retained_inputs(&self) -> &'static [usize] {
        &[0, 1]
    }
}

pub fn mul(a: &Variable, b: &Variable) -> Result<Variable> {
    apply_single(Box::new(Mul), &[a, b])
}

struct Div;

impl Op for Div {
    fn name(&self) -> &'static str {
        "div"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![tensor::ewise(EwiseOp::Div, &xs[0], &xs[1])?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None, None]) };
        let a = ctx.input(0)?;
        let b = ctx.input(1)?;
        let ga = match_dtype(reduce_like(&div(&g, &b)?, ctx.input_shape(0))?, ctx.input_dtype(0))?;
        // -g * a / b^2
        let gb_full = neg(&div(&mul(&g, &a)?, &mul(&b, &b)?)?)?;
        let gb = match_dtype(reduce_like(&gb_full, ctx.input_shape(1))?, ctx.input_dtype(1))?;
        Ok(vec![Some(ga), Some(gb)])
    }
    fn retained_inputs(&self) -> &'static [usize] {
        &[0, 1]
    }
}

pub fn div(a: &Variable, b: &Variable) -> Result<Variable> {
    apply_single(Box::new(Div), &[a, b])
}

struct Cast {
    to: DType,
}

impl Op for Cast {
    fn name(&self) -> &'static str {
        "cast"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].cast(self.to)])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        match only(grads) {
            Some(g) => Ok(vec![Some(cast(&g, ctx.input_dtype(0))?)]),
            None => Ok(vec![None]),
        }
    }
}

pub fn cast(x: &Variable, to: DType) -> Result<Variable> {
    apply_single(Box::new(Cast { to }), &[x])
}

// ---------------------------------------------------------------------------
// activations and transcendentals
// ---------------------------------------------------------------------------

struct Relu;

impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].map(|v| if v > 0.0 { v } else { 0.0 })])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None]) };
        let x = ctx.input(0)?;
        // Subgradient at 0 is 0: strict comparison.
        let mask = constant(x.data().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        Ok(vec![Some(mul(&g, &mask)?)])
    }
    fn retained_inputs(&self) -> &'static [usize] {
        &[0]
    }
}

pub fn relu(x: &Variable) -> Result<Variable> {
    apply_single(Box::new(Relu), &[x])
}

struct Tanh;

impl Op for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].map(f64::tanh)])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None]) };
        // Uses the output, not the input: g * (1 - y^2).
        let y = ctx.output(0)?;
        let one = scalar_like(&y, 1.0);
        Ok(vec![Some(mul(&g, &sub(&one, &mul(&y, &y)?)?)?)])
    }
    fn retained_outputs(&self) -> &'static [usize] {
        &[0]
    }
}

pub fn tanh(x: &Variable) -> Result<Variable> {
    apply_single(Box::new(Tanh), &[x])
}

struct Exp;

impl Op for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].map(f64::exp)])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None]) };
        let y = ctx.output(0)?;
        Ok(vec![Some(mul(&g, &y)?)])
    }
    fn retained_outputs(&self) -> &'static [usize] {
        &[0]
    }
}

pub fn exp(x: &Variable) -> Result<Variable> {
    apply_single(Box::new(Exp), &[x])
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

struct Matmul;

impl Op for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].matmul(&xs[1])?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None, None]) };
        let a = ctx.input(0)?;
        let b = ctx.input(1)?;
        let ga = matmul(&g, &transpose(&b)?)?;
        let gb = matmul(&transpose(&a)?, &g)?;
        Ok(vec![Some(ga), Some(gb)])
    }
    fn retained_inputs(&self) -> &'static [usize] {
        &[0, 1]
    }
}

pub fn matmul(a: &Variable, b: &Variable) -> Result<Variable> {
    apply_single(Box::new(Matmul), &[a, b])
}

struct Linear;

impl Op for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let (x, w, b) = (&xs[0], &xs[1], &xs[2]);
        if b.shape().rank() != 1 {
            return Err(fwd_err("linear", format!("bias must be rank 1, got {}", b.shape())));
        }
        if w.shape().rank() != 2 || w.shape().dims()[0] != b.shape().dims()[0] {
            return Err(fwd_err(
                "linear",
                format!("weight {} does not match bias {}", w.shape(), b.shape()),
            ));
        }
        let y = x.matmul(&w.transpose())?;
        Ok(vec![tensor::ewise(EwiseOp::Add, &y, b)?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None, None, None]) };
        let x = ctx.input(0)?;
        let w = ctx.input(1)?;
        let gx = matmul(&g, &w)?;
        let gw = matmul(&transpose(&g)?, &x)?;
        let gb = sum_to(&g, ctx.input_shape(2).clone())?;
        Ok(vec![Some(gx), Some(gw), Some(gb)])
    }
    fn retained_inputs(&self) -> &'static [usize] {
        &[0, 1]
    }
}

/// Affine map `x @ w.T + b`.
pub fn linear(x: &Variable, w: &Variable, b: &Variable) -> Result<Variable> {
    apply_single(Box::new(Linear), &[x, w, b])
}

// ---------------------------------------------------------------------------
// reductions and shape adjoints
// ---------------------------------------------------------------------------

struct Sum {
    axes: Vec<usize>,
    keepdims: bool,
}

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![tensor::reduce(ReduceOp::Sum, &xs[0], &self.axes, self.keepdims)?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None]) };
        let in_shape = ctx.input_shape(0).clone();
        let g = if self.keepdims {
            g
        } else {
            // reinsert the reduced axes as extent 1
            let mut dims = Vec::with_capacity(in_shape.rank());
            for (i, &d) in in_shape.dims().iter().enumerate() {
                dims.push(if self.axes.contains(&i) { 1 } else { d });
            }
            reshape(&g, Shape::new(dims))?
        };
        Ok(vec![Some(broadcast_to(&g, in_shape)?)])
    }
}

/// Sum along `axes`; shape bookkeeping is cached on the node, nothing is
/// retained.
pub fn sum(x: &Variable, axes: &[usize], keepdims: bool) -> Result<Variable> {
    apply_single(
        Box::new(Sum {
            axes: axes.to_vec(),
            keepdims,
        }),
        &[x],
    )
}

/// Sum all axes down to a scalar.
pub fn sum_all(x: &Variable) -> Result<Variable> {
    let axes: Vec<usize> = (0..x.shape().rank()).collect();
    sum(x, &axes, false)
}

/// Arithmetic mean along `axes`: sum scaled by 1/N with N frozen now.
pub fn mean(x: &Variable, axes: &[usize], keepdims: bool) -> Result<Variable> {
    let n: usize = axes.iter().map(|&a| x.shape().dims()[a]).product();
    let s = sum(x, axes, keepdims)?;
    mul(&s, &scalar_like(&s, 1.0 / n as f64))
}

/// Mean of all elements.
pub fn mean_all(x: &Variable) -> Result<Variable> {
    let axes: Vec<usize> = (0..x.shape().rank()).collect();
    mean(x, &axes, false)
}

struct Reshape {
    to: Shape,
}

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].reshape(self.to.clone())?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        match only(grads) {
            Some(g) => Ok(vec![Some(reshape(&g, ctx.input_shape(0).clone())?)]),
            None => Ok(vec![None]),
        }
    }
}

pub fn reshape(x: &Variable, to: impl Into<Shape>) -> Result<Variable> {
    apply_single(Box::new(Reshape { to: to.into() }), &[x])
}

struct Transpose;

impl Op for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].transpose()])
    }
    fn backward(&self, _ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        match only(grads) {
            Some(g) => Ok(vec![Some(transpose(&g)?)]),
            None => Ok(vec![None]),
        }
    }
}

pub fn transpose(x: &Variable) -> Result<Variable> {
    apply_single(Box::new(Transpose), &[x])
}

struct BroadcastTo {
    to: Shape,
}

impl Op for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].broadcast_to(self.to.clone())?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        match only(grads) {
            Some(g) => Ok(vec![Some(sum_to(&g, ctx.input_shape(0).clone())?)]),
            None => Ok(vec![None]),
        }
    }
}

pub fn broadcast_to(x: &Variable, to: impl Into<Shape>) -> Result<Variable> {
    apply_single(Box::new(BroadcastTo { to: to.into() }), &[x])
}

struct SumTo {
    to: Shape,
}

impl Op for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![xs[0].sum_to(self.to.clone())?])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        match only(grads) {
            Some(g) => Ok(vec![Some(broadcast_to(&g, ctx.input_shape(0).clone())?)]),
            None => Ok(vec![None]),
        }
    }
}

pub fn sum_to(x: &Variable, to: impl Into<Shape>) -> Result<Variable> {
    apply_single(Box::new(SumTo { to: to.into() }), &[x])
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

struct SoftmaxCrossEntropy {
    /// Class indices, one per batch row; carried outside the graph.
    labels: Vec<usize>,
}

impl SoftmaxCrossEntropy {
    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.shape().rank() != 2 {
            return Err(fwd_err(
                "softmax_cross_entropy",
                format!("logits must be rank 2, got {}", x.shape()),
            ));
        }
        let (batch, classes) = (x.shape().dims()[0], x.shape().dims()[1]);
        if self.labels.len() != batch {
            return Err(fwd_err(
                "softmax_cross_entropy",
                format!("{} labels for batch of {}", self.labels.len(), batch),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(fwd_err(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", bad, classes),
            ));
        }
        Ok((batch, classes))
    }

    /// Detached per-row maxima, shaped (batch, 1).
    fn row_max(x: &Tensor) -> Result<Tensor> {
        Ok(tensor::reduce(ReduceOp::Max, x, &[1], true)?)
    }
}

impl Op for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn forward(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let x = &xs[0];
        let (batch, classes) = self.check(x)?;
        let vals = x.to_f64_vec();
        let mut total = 0.0;
        for (row, &label) in self.labels.iter().enumerate() {
            let row_vals = &vals[row * classes..(row + 1) * classes];
            let m = row_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row_vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row_vals[label];
        }
        let loss = total / batch as f64;
        Ok(vec![match x.dtype() {
            DType::F32 => Tensor::scalar_f32(loss as f32),
            DType::F64 => Tensor::scalar(loss),
        }])
    }
    fn backward(&self, ctx: &OpContext<'_>, grads: &[Option<Variable>]) -> Result<Vec<Option<Variable>>> {
        let Some(g) = only(grads) else { return Ok(vec![None]) };
        let x = ctx.input(0)?;
        let (batch, classes) = (x.shape().dims()[0], x.shape().dims()[1]);
        // softmax from the retained logits, shift detached for stability
        let shift = constant(Self::row_max(&x.data())?);
        let e = exp(&sub(&x, &shift)?)?;
        let norm = sum(&e, &[1], true)?;
        let p = div(&e, &norm)?;
        let mut onehot = Tensor::zeros(x.shape(), x.dtype());
        {
            use crate::tensor::SliceMut;
            match onehot.values_mut() {
                SliceMut::F32(v) => {
                    for (row, &label) in self.labels.iter().enumerate() {
                        v[row * classes + label] = 1.0;
                    }
                }
                SliceMut::F64(v) => {
                    for (row, &label) in self.labels.iter().enumerate() {
                        v[row * classes + label] = 1.0;
                    }
                }
            }
        }
        let diff = sub(&p, &constant(onehot))?;
        let coeff = mul(&broadcast_to(&g, x.shape())?, &scalar_like(&g, 1.0 / batch as f64))?;
        Ok(vec![Some(mul(&diff, &coeff)?)])
    }
    fn retained_inputs(&self) -> &'static [usize] {
        &[0]
    }
}

/// Mean over the batch of the cross entropy between softmax(logits) and the
/// integer labels. No gradient flows to the labels.
pub fn softmax_cross_entropy(logits: &Variable, labels: &[usize]) -> Result<Variable> {
    apply_single(
        Box::new(SoftmaxCrossEntropy {
            labels: labels.to_vec(),
        }),
        &[logits],
    )
}
