//! Numerical gradient checking for the operation catalog.
//!
//! First-order gradients are compared against central finite differences of
//! the forward computation; where an operation is twice differentiable, a
//! second-order check compares analytic Hessian-vector products against
//! finite differences of first-order gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{grad, no_recording, Result, Variable};
use crate::tensor::{Shape, Tensor};

/// Step for central differences on f64 inputs.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Central-difference gradients of a scalar-valued function. Independent of
/// the backward path: only forward evaluations are used.
pub fn numerical_grad(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    xs: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>> {
    let mut grads = Vec::with_capacity(xs.len());
    for k in 0..xs.len() {
        let base = xs[k].to_f64_vec();
        let mut gk = vec![0.0; base.len()];
        let mut probe: Vec<Tensor> = xs.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            probe[k] = Tensor::from_vec(xs[k].shape().clone(), plus)?;
            let fp = f(&probe)?;
            let mut minus = base.clone();
            minus[i] -= eps;
            probe[k] = Tensor::from_vec(xs[k].shape().clone(), minus)?;
            let fm = f(&probe)?;
            gk[i] = (fp - fm) / (2.0 * eps);
        }
        probe[k] = xs[k].clone();
        grads.push(Tensor::from_vec(xs[k].shape().clone(), gk)?);
    }
    Ok(grads)
}

/// max_i |a_i - n_i| / (1 + |n_i|): relative for large entries, absolute for
/// small ones.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .to_f64_vec()
        .iter()
        .zip(numeric.to_f64_vec())
        .map(|(&a, n)| (a - n).abs() / (1.0 + n.abs()))
        .fold(0.0, f64::max)
}

/// One catalog entry's check result.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
    /// Present where the op is twice differentiable.
    pub second_order_err: Option<f64>,
    pub second_order_tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} first-order {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_err,
            self.tolerance
        )?;
        if let Some(second) = self.second_order_err {
            write!(f, "  second-order {:.3e} (tol {:.0e})", second, self.second_order_tolerance)?;
        }
        Ok(())
    }
}

/// Results for the whole catalog.
#[derive(Debug, Clone, Default)]
pub struct CatalogReport {
    pub entries: Vec<CheckEntry>,
}

impl CatalogReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

type LossBuilder = Box<dyn Fn(&[Variable]) -> Result<Variable>>;

struct Case {
    name: &'static str,
    shapes: Vec<Shape>,
    /// Maps sampled values into valid op inputs (kink margins, such as
    /// keeping relu inputs away from 0 and divisors away from 0).
    condition: fn(usize, f64) -> f64,
    build: LossBuilder,
    tolerance: f64,
    second_order: bool,
}

fn plain(_k: usize, v: f64) -> f64 {
    v
}

/// Weighted scalar readout so gradients are generic, with fixed weights.
fn weighted(y: &Variable, weights: &Variable) -> Result<Variable> {
    sum_all(&mul(y, weights)?)
}

fn catalog(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let weight = |shape: &Shape, rng: &mut ChaCha8Rng| {
        let vals: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Variable::new(Tensor::from_vec(shape.clone(), vals).unwrap())
    };

    let w = weight(&Shape::new(vec![2, 3]), rng);
    cases.push(Case {
        name: "add",
        shapes: vec![Shape::new(vec![2, 3]), Shape::new(vec![3])],
        condition: plain,
        build: Box::new(move |xs| weighted(&add(&xs[0], &xs[1])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![2, 3]), rng);
    cases.push(Case {
        name: "sub",
        shapes: vec![Shape::new(vec![2, 3]), Shape::new(vec![2, 3])],
        condition: plain,
        build: Box::new(move |xs| weighted(&sub(&xs[0], &xs[1])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![4]), rng);
    cases.push(Case {
        name: "neg",
        shapes: vec![Shape::new(vec![4])],
        condition: plain,
        build: Box::new(move |xs| weighted(&neg(&xs[0])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![2, 3]), rng);
    cases.push(Case {
        name: "mul",
        shapes: vec![Shape::new(vec![2, 1]), Shape::new(vec![2, 3])],
        condition: plain,
        build: Box::new(move |xs| weighted(&mul(&xs[0], &xs[1])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![2, 3]), rng);
    cases.push(Case {
        name: "div",
        shapes: vec![Shape::new(vec![2, 3]), Shape::new(vec![3])],
        // keep divisors away from zero
        condition: |k, v| if k == 1 { v.signum() * (v.abs() + 0.5) } else { v },
        build: Box::new(move |xs| weighted(&div(&xs[0], &xs[1])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![2, 2]), rng);
    cases.push(Case {
        name: "matmul",
        shapes: vec![Shape::new(vec![2, 3]), Shape::new(vec![3, 2])],
        condition: plain,
        build: Box::new(move |xs| weighted(&matmul(&xs[0], &xs[1])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![2, 4]), rng);
    cases.push(Case {
        name: "linear",
        shapes: vec![Shape::new(vec![2, 3]), Shape::new(vec![4, 3]), Shape::new(vec![4])],
        condition: plain,
        build: Box::new(move |xs| weighted(&linear(&xs[0], &xs[1], &xs[2])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![5]), rng);
    cases.push(Case {
        name: "relu",
        shapes: vec![Shape::new(vec![5])],
        // finite differences disagree at the kink; keep a margin around 0
        condition: |_, v| v.signum() * (v.abs() + 5e-2),
        build: Box::new(move |xs| weighted(&relu(&xs[0])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![3]), rng);
    cases.push(Case {
        name: "tanh",
        shapes: vec![Shape::new(vec![3])],
        condition: plain,
        build: Box::new(move |xs| weighted(&tanh(&xs[0])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![3]), rng);
    cases.push(Case {
        name: "exp",
        shapes: vec![Shape::new(vec![3])],
        condition: |_, v| v * 0.5,
        build: Box::new(move |xs| weighted(&exp(&xs[0])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![2, 4]), rng);
    cases.push(Case {
        name: "sum",
        shapes: vec![Shape::new(vec![2, 3, 4])],
        condition: plain,
        build: Box::new(move |xs| weighted(&sum(&xs[0], &[1], false)?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![3]), rng);
    cases.push(Case {
        name: "mean",
        shapes: vec![Shape::new(vec![2, 3])],
        condition: plain,
        build: Box::new(move |xs| weighted(&mean(&xs[0], &[0], false)?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![3, 2]), rng);
    cases.push(Case {
        name: "reshape",
        shapes: vec![Shape::new(vec![2, 3])],
        condition: plain,
        build: Box::new(move |xs| weighted(&reshape(&xs[0], [3, 2])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![3, 2]), rng);
    cases.push(Case {
        name: "transpose",
        shapes: vec![Shape::new(vec![2, 3])],
        condition: plain,
        build: Box::new(move |xs| weighted(&transpose(&xs[0])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![3, 4]), rng);
    cases.push(Case {
        name: "broadcast_to",
        shapes: vec![Shape::new(vec![3, 1])],
        condition: plain,
        build: Box::new(move |xs| weighted(&broadcast_to(&xs[0], [3, 4])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    let w = weight(&Shape::new(vec![4]), rng);
    cases.push(Case {
        name: "sum_to",
        shapes: vec![Shape::new(vec![3, 4])],
        condition: plain,
        build: Box::new(move |xs| weighted(&sum_to(&xs[0], [4])?, &w)),
        tolerance: 1e-6,
        second_order: true,
    });

    cases.push(Case {
        name: "softmax_cross_entropy",
        shapes: vec![Shape::new(vec![4, 3])],
        condition: plain,
        build: Box::new(move |xs| softmax_cross_entropy(&xs[0], &[0, 1, 2, 0])),
        tolerance: 1e-6,
        second_order: true,
    });

    cases
}

fn sample_inputs(case: &Case, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    case.shapes
        .iter()
        .enumerate()
        .map(|(k, shape)| {
            let vals: Vec<f64> = (0..shape.len())
                .map(|_| (case.condition)(k, rng.gen_range(-2.0..2.0)))
                .collect();
            Tensor::from_vec(shape.clone(), vals).unwrap()
        })
        .collect()
}

fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<CheckEntry> {
    let xs = sample_inputs(case, rng);

    // analytic first-order
    let vars: Vec<Variable> = xs.iter().map(|t| Variable::new(t.clone())).collect();
    let loss = (case.build)(&vars)?;
    let analytic = grad(&[loss], &vars, None, false)?;

    // numerical oracle
    let mut f = |probe: &[Tensor]| -> Result<f64> {
        let _quiet = no_recording();
        let vars: Vec<Variable> = probe.iter().map(|t| Variable::new(t.clone())).collect();
        Ok((case.build)(&vars)?.item())
    };
    let numeric = numerical_grad(&mut f, &xs, DEFAULT_EPS)?;

    let mut max_err = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        max_err = max_err.max(max_rel_err(&a.data(), n));
    }

    let second_order_tolerance = 1e-4;
    let second_order_err = if case.second_order {
        Some(second_order_err(case, &xs, rng)?)
    } else {
        None
    };

    let passed = max_err <= case.tolerance
        && second_order_err.map(|e| e <= second_order_tolerance).unwrap_or(true);
    Ok(CheckEntry {
        name: case.name,
        max_err,
        tolerance: case.tolerance,
        second_order_err,
        second_order_tolerance,
        passed,
    })
}

/// Analytic Hessian-vector products against finite differences of grad().
fn second_order_err(case: &Case, xs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<f64> {
    let dirs: Vec<Tensor> = xs
        .iter()
        .map(|t| {
            let vals: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(t.shape().clone(), vals).unwrap()
        })
        .collect();

    // analytic: differentiate sum_k <grad_k, v_k> once more
    let vars: Vec<Variable> = xs.iter().map(|t| Variable::new(t.clone())).collect();
    let loss = (case.build)(&vars)?;
    let grads = grad(&[loss], &vars, None, true)?;
    let mut dot: Option<Variable> = None;
    for (g, v) in grads.iter().zip(&dirs) {
        let term = sum_all(&mul(g, &Variable::new(v.clone()))?)?;
        dot = Some(match dot {
            None => term,
            Some(acc) => add(&acc, &term)?,
        });
    }
    let hv = grad(&[dot.expect("at least one input")], &vars, None, false)?;

    // numeric: central difference of the analytic first-order gradient along v
    let eps = 1e-5;
    let grads_at = |shift: f64| -> Result<Vec<Tensor>> {
        let shifted: Vec<Variable> = xs
            .iter()
            .zip(&dirs)
            .map(|(x, v)| Variable::new(x.add(&v.scale(shift)).unwrap()))
            .collect();
        let loss = (case.build)(&shifted)?;
        Ok(grad(&[loss], &shifted, None, false)?.into_iter().map(|g| g.data()).collect())
    };
    let plus = grads_at(eps)?;
    let minus = grads_at(-eps)?;

    let mut max_err = 0.0f64;
    for ((hp, hm), analytic) in plus.iter().zip(&minus).zip(&hv) {
        let numeric = hp.sub(hm).unwrap().scale(1.0 / (2.0 * eps));
        max_err = max_err.max(max_rel_err(&analytic.data(), &numeric));
    }
    Ok(max_err)
}

/// Check every operation in the catalog with seeded random inputs.
pub fn check_catalog(seed: u64) -> Result<CatalogReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = catalog(&mut rng);
    let mut report = CatalogReport::default();
    for case in &cases {
        report.entries.push(check_case(case, &mut rng)?);
    }
    Ok(report)
}

/// Check one named operation from the catalog; `None` for unknown names.
pub fn check_op(name: &str, seed: u64) -> Result<Option<CheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = catalog(&mut rng);
    for case in &cases {
        if case.name == name {
            return check_case(case, &mut rng).map(Some);
        }
    }
    Ok(None)
}
