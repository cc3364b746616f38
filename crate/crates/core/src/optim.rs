//! Parameter update rules over a model's parameter tree.
//!
//! An optimizer captures the parameter handles at setup and mutates their
//! buffers in place on `update()` — the one sanctioned mutation of tensors.
//! Gradients are left untouched; clearing them is the training loop's step.

use std::collections::HashMap;

use crate::links::{namedparams, Link, Parameter};
use crate::tensor::{SliceMut, SliceRef, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("parameter {path}: gradient shape {got} does not match {want}")]
    GradShape {
        path: String,
        want: crate::tensor::Shape,
        got: crate::tensor::Shape,
    },
    #[error("parameter {path} diverged structurally across ranks: {detail}")]
    StructuralDivergence { path: String, detail: String },
    #[error("communication: {0}")]
    Comm(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Update rule and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    Sgd { lr: f64 },
    MomentumSgd { lr: f64, mu: f64 },
    Adam { alpha: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Rule {
    pub fn sgd(lr: f64) -> Rule {
        Rule::Sgd { lr }
    }

    pub fn momentum_sgd(lr: f64, mu: f64) -> Rule {
        Rule::MomentumSgd { lr, mu }
    }

    pub fn adam(alpha: f64, beta1: f64, beta2: f64, eps: f64) -> Rule {
        Rule::Adam { alpha, beta1, beta2, eps }
    }

    /// Adam with the conventional defaults.
    pub fn adam_default() -> Rule {
        Rule::Adam {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter state slots (momentum buffer, Adam moments), allocated
/// lazily on first update.
#[derive(Default)]
struct Slots {
    bufs: Vec<Vec<f64>>,
}

/// Anything that can apply one update step to its captured parameters.
pub trait ParamUpdater {
    fn update(&mut self) -> Result<()>;
}

pub struct Optimizer {
    rule: Rule,
    targets: Vec<(String, Parameter)>,
    slots: HashMap<String, Slots>,
    /// Update steps taken; incremented once per `update()`.
    t: u64,
}

/// Capture the model's parameter tree under the given rule. State slots are
/// allocated lazily on the first update; re-running `setup` resets the step
/// counter and slots.
pub fn setup(rule: Rule, model: &dyn Link) -> Optimizer {
    Optimizer {
        rule,
        targets: namedparams(model),
        slots: HashMap::new(),
        t: 0,
    }
}

impl Optimizer {
    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn slot_count(&self, path: &str) -> usize {
        self.slots.get(path).map(|s| s.bufs.len()).unwrap_or(0)
    }

    pub(crate) fn targets(&self) -> &[(String, Parameter)] {
        &self.targets
    }

    fn apply_rule(rule: Rule, t: u64, w: &mut [f64], g: &[f64], slots: &mut Slots) {
        match rule {
            Rule::Sgd { lr } => {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
            Rule::MomentumSgd { lr, mu } => {
                if slots.bufs.is_empty() {
                    slots.bufs.push(vec![0.0; w.len()]);
                }
                let v = &mut slots.bufs[0];
                for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = mu * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
            Rule::Adam { alpha, beta1, beta2, eps } => {
                if slots.bufs.is_empty() {
                    slots.bufs.push(vec![0.0; w.len()]);
                    slots.bufs.push(vec![0.0; w.len()]);
                }
                let (m, v) = {
                    let (a, b) = slots.bufs.split_at_mut(1);
                    (&mut a[0], &mut b[0])
                };
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                for (((wi, gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *wi -= alpha * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

impl ParamUpdater for Optimizer {
    /// In-place update of every captured parameter. Errors name the first
    /// parameter missing a gradient.
    fn update(&mut self) -> Result<()> {
        self.t += 1;
        for (path, param) in &self.targets {
            let var = param.variable();
            let grad = var.grad().ok_or_else(|| OptimError::MissingGrad(path.clone()))?;
            let g_tensor = grad.data();
            if g_tensor.shape() != &var.shape() {
                return Err(OptimError::GradShape {
                    path: path.clone(),
                    want: var.shape(),
                    got: g_tensor.shape().clone(),
                });
            }
            let g = g_tensor.to_f64_vec();
            let slots = self.slots.entry(path.clone()).or_default();
            var.with_data_mut(|data| match data.values_mut() {
                SliceMut::F32(w) => {
                    let mut wide: Vec<f64> = w.iter().map(|&x| x as f64).collect();
                    Optimizer::apply_rule(self.rule, self.t, &mut wide, &g, slots);
                    for (dst, src) in w.iter_mut().zip(wide) {
                        *dst = src as f32;
                    }
                }
                SliceMut::F64(w) => {
                    Optimizer::apply_rule(self.rule, self.t, w, &g, slots);
                }
            });
        }
        Ok(())
    }
}

/// Elementwise oracle used by tests: one SGD step over raw values.
pub fn sgd_step_oracle(w: &Tensor, g: &Tensor, lr: f64) -> Vec<f64> {
    match (w.values(), g.values()) {
        (SliceRef::F64(w), SliceRef::F64(g)) => w.iter().zip(g).map(|(wi, gi)| wi - lr * gi).collect(),
        _ => w
            .to_f64_vec()
            .iter()
            .zip(g.to_f64_vec())
            .map(|(wi, gi)| wi - lr * gi)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Variable;
    use crate::links::{InitCtx, Initializer, LinkBody, Link, Mlp, Parameter};
    use crate::ops;
    use crate::tensor::{DType, Tensor};

    struct OneParam {
        body: LinkBody,
    }

    impl OneParam {
        fn new(value: f64) -> OneParam {
            let ctx = InitCtx::new(0).with_dtype(DType::F64);
            let mut body = LinkBody::new();
            body.init_scope()
                .parameter("w", [1], Initializer::Constant(value), &ctx)
                .unwrap();
            OneParam { body }
        }

        fn w(&self) -> &Parameter {
            self.body.param("w").unwrap()
        }
    }

    impl Link for OneParam {
        fn body(&self) -> &LinkBody {
            &self.body
        }
        fn body_mut(&mut self) -> &mut LinkBody {
            &mut self.body
        }
        fn forward(&self, x: &Variable) -> crate::autograd::Result<Variable> {
            ops::mul(x, self.w().variable())
        }
    }

    fn set_grad(p: &Parameter, g: Vec<f64>) {
        let shape = p.variable().shape();
        p.variable()
            .set_grad(Some(Variable::new(Tensor::from_vec(shape, g).unwrap())));
    }

    #[test]
    fn sgd_step_is_w_minus_lr_g() {
        let model = OneParam::new(1.0);
        let mut opt = setup(Rule::sgd(0.1), &model);
        set_grad(model.w(), vec![2.0]);
        opt.update().unwrap();
        assert_eq!(model.w().data().to_f64_vec(), vec![0.8]);
        // grads untouched by the optimizer
        assert!(model.w().variable().grad().is_some());
    }

    #[test]
    fn sgd_setup_allocates_nothing() {
        let model = OneParam::new(1.0);
        let mut opt = setup(Rule::sgd(0.1), &model);
        assert_eq!(opt.slot_count("/w"), 0);
        set_grad(model.w(), vec![1.0]);
        opt.update().unwrap();
        assert_eq!(opt.slot_count("/w"), 0);
    }

    #[test]
    fn momentum_two_steps_hand_iterated() {
        // v = mu*v + g; w -= lr*v with mu=0.9, lr=0.1, g=1:
        // step1: v=1,   w=1-0.1       = 0.9
        // step2: v=1.9, w=0.9-0.19    = 0.71
        let model = OneParam::new(1.0);
        let mut opt = setup(Rule::momentum_sgd(0.1, 0.9), &model);
        set_grad(model.w(), vec![1.0]);
        opt.update().unwrap();
        assert!((model.w().data().item() - 0.9).abs() < 1e-15);
        set_grad(model.w(), vec![1.0]);
        opt.update().unwrap();
        assert!((model.w().data().item() - 0.71).abs() < 1e-15);
        assert_eq!(opt.slot_count("/w"), 1);
    }

    #[test]
    fn adam_first_step_scalar_oracle() {
        // scalar recurrence with g=1, defaults: m_hat=v_hat=1, so the step
        // is alpha/(1+eps)
        let model = OneParam::new(1.0);
        let mut opt = setup(Rule::adam_default(), &model);
        set_grad(model.w(), vec![1.0]);
        opt.update().unwrap();
        let want = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((model.w().data().item() - want).abs() < 1e-15);
        assert_eq!(opt.slot_count("/w"), 2);
    }

    #[test]
    fn re_setup_resets_step_counter() {
        let model = OneParam::new(1.0);
        let mut opt = setup(Rule::adam_default(), &model);
        set_grad(model.w(), vec![1.0]);
        opt.update().unwrap();
        assert_eq!(opt.step_count(), 1);
        let opt2 = setup(Rule::adam_default(), &model);
        assert_eq!(opt2.step_count(), 0);
        assert_eq!(opt2.slot_count("/w"), 0);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let mut ctx = InitCtx::new(3).with_dtype(DType::F64);
        let model = Mlp::new(2, 3, 2, &mut ctx).unwrap();
        let mut opt = setup(Rule::sgd(0.1), &model);
        let err = opt.update().unwrap_err();
        assert!(matches!(err, OptimError::MissingGrad(path) if path == "/l1/W"));
    }

    #[test]
    fn identical_state_gives_identical_update() {
        let run = || {
            let model = OneParam::new(0.5);
            let mut opt = setup(Rule::adam_default(), &model);
            for g in [0.3, -0.7, 0.1] {
                set_grad(model.w(), vec![g]);
                opt.update().unwrap();
            }
            model.w().data().to_le_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // minimize ||w*x - y||^2 on a fixed scalar problem
        let model = OneParam::new(0.0);
        let mut opt = setup(Rule::sgd(1e-2), &model);
        let x = Variable::new(Tensor::from_vec([4], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let y = Variable::new(Tensor::from_vec([4], vec![2.0, 4.0, -2.0, 1.0]).unwrap());
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            crate::links::cleargrads(&model);
            let pred = model.forward(&x).unwrap();
            let diff = ops::sub(&pred, &y).unwrap();
            let loss = ops::sum_all(&ops::mul(&diff, &diff).unwrap()).unwrap();
            let value = loss.item();
            assert!(value <= prev + 1e-12, "loss must not increase: {} -> {}", prev, value);
            prev = value;
            loss.backward().unwrap();
            opt.update().unwrap();
        }
        assert!(prev < 1e-3);
        assert!((model.w().data().item() - 2.0).abs() < 0.05);
    }
}
