//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Step and tolerance of a check. The relative error of one element is
/// `|analytic - numeric| / (|numeric| + floor)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Checks at most this many evenly spaced elements per input.
    pub max_elements: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

impl GradCheck {
    /// Compares the gradient of the scalar `f(inputs)` with central
    /// differences of `f` itself.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradReport>
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    {
        let graph = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
        let loss = f(&graph, &vars)?;
        graph.check_finite()?;
        let grads = graph.backward(loss)?;

        let eval = |inputs: &[Tensor]| -> Result<f64> {
            let g = Graph::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let v = f(&g, &vars)?.value().item();
            Ok(v)
        };

        let mut report = GradReport {
            tolerance: self.tolerance,
            ..GradReport::default()
        };
        let mut work = inputs.to_vec();
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var);
            let n = inputs[k].numel();
            let stride = match self.max_elements {
                Some(m) if n > m => n.div_ceil(m),
                _ => 1,
            };
            for e in (0..n).step_by(stride) {
                let orig = work[k].data()[e];
                work[k].data_mut()[e] = orig + self.step;
                let plus = eval(&work)?;
                work[k].data_mut()[e] = orig - self.step;
                let minus = eval(&work)?;
                work[k].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / (numeric.abs() + self.floor);
                report.checked += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    if rel >= report.max_rel_err {
                        report.worst = Some((k, e, a, numeric));
                    }
                }
            }
        }
        Ok(report)
    }
}

impl GradCheck {
    /// [`GradCheck::run`] over every parameter of `store` plus `extra` inputs.
    pub fn run_with_store<F>(&self, store: &ParamStore, extra: &[Tensor], f: F) -> Result<GradReport>
    where
        F: for<'g> Fn(&Bound<'g>, &[Var<'g>]) -> Result<Var<'g>>,
    {
        let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.extend_from_slice(extra);
        self.run(&inputs, |_, vars| {
            let (params, rest) = vars.split_at(names.len());
            let bound = Bound::from_vars(names.iter().cloned().zip(params.iter().copied()));
            f(&bound, rest)
        })
    }
}

/// Reduces `y` to a scalar through fixed pseudo-random weights in `[-1, 1]`,
/// so that every output element contributes a distinct sensitivity.
pub fn probe<'g>(y: &Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = y.shape();
    let w: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w = y.graph().constant(Tensor::new(&shape, w)?);
    Ok(y.mul(&w)?.sum())
}
