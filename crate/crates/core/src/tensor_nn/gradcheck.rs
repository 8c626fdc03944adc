//! Central finite-difference verification of reverse-mode gradients.

use std::sync::Arc;

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Maximum number of coordinates probed per input (all when smaller).
    pub max_coords: usize,
    /// Entries whose analytic and numeric gradients both fall below
    /// `rel_floor * max|grad|` of their tensor are compared against that
    /// floor instead of their own magnitude.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: 64,
            rel_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

fn eval<F>(f: &F, inputs: &[Tensor], pattern: &Arc<Vec<Vec<bool>>>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_frozen_kinks(pattern.clone());
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compare the reverse-mode gradient of the scalar `f` with central
/// differences at `inputs`. `f` must be deterministic.
///
/// Probes keep every PReLU on the branch it takes at `inputs`, so a step
/// never straddles a kink and the difference quotient converges to the
/// one-sided derivative the backward pass computes. A half-step Richardson
/// term cancels the h^2 truncation error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let pattern = Arc::new(g.kink_pattern().unwrap_or_default().to_vec());
    let grads = g.backward(out);
    let mut report = GradCheckReport::default();
    let mut r = rng::stream(opts.seed, "gradcheck", &[]);
    let h = opts.h;
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[ii]);
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (opts.rel_floor * scale).max(f64::MIN_POSITIVE);
        let coords: Vec<usize> = if input.len() <= opts.max_coords {
            (0..input.len()).collect()
        } else {
            let mut c = sample(&mut r, input.len(), opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut probe = inputs.to_vec();
        for j in coords {
            let x0 = input.data()[j];
            let mut diff = |step: f64| -> Result<f64> {
                probe[ii].data_mut()[j] = x0 + step;
                let fp = eval(&f, &probe, &pattern)?;
                probe[ii].data_mut()[j] = x0 - step;
                let fm = eval(&f, &probe, &pattern)?;
                probe[ii].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * step))
            };
            let coarse = diff(h)?;
            let fine = diff(0.5 * h)?;
            let n = (4.0 * fine - coarse) / 3.0;
            let a = analytic.data()[j];
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ii, j));
            }
        }
    }
    Ok(report)
}
