use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Lower bound on the singular-value estimate used as a divisor.
pub const SIGMA_EPS: f64 = 1e-12;

/// Power-iteration vectors for a weight viewed as `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64]) {
    let n = dot(x, x).sqrt();
    if n > SIGMA_EPS {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

/// `W v` for a row-major `rows x cols` matrix.
fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], v)).collect()
}

/// `W^T u` for a row-major `rows x cols` matrix.
fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        super::tensor::axpy(&mut out, u[r], &w[r * cols..(r + 1) * cols]);
    }
    out
}

impl SpectralState {
    /// Random unit `u` with `v` derived from it.
    pub fn init<R: Rng + ?Sized>(w: &Tensor, rng: &mut R) -> Self {
        let (rows, cols) = matrix_dims(w);
        let mut u: Vec<f64> = Tensor::randn(&[rows], 1.0, rng).into_data();
        normalize(&mut u);
        let mut v = mat_t_vec(w.data(), rows, cols, &u);
        normalize(&mut v);
        Self { u, v }
    }

    /// Run `iterations` rounds of power iteration against `w`.
    pub fn power_iterate(&mut self, w: &Tensor, iterations: usize) {
        let (rows, cols) = matrix_dims(w);
        for _ in 0..iterations {
            let mut v = mat_t_vec(w.data(), rows, cols, &self.u);
            normalize(&mut v);
            let mut u = mat_vec(w.data(), rows, cols, &v);
            normalize(&mut u);
            self.u = u;
            self.v = v;
        }
    }

    /// Singular-value estimate `u^T W v`, floored at [`SIGMA_EPS`].
    pub fn sigma(&self, w: &Tensor) -> f64 {
        let (rows, cols) = matrix_dims(w);
        dot(&self.u, &mat_vec(w.data(), rows, cols, &self.v)).max(SIGMA_EPS)
    }
}

/// A weight is viewed as `shape[0] x prod(shape[1..])`.
pub fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let rows = w.dim(0);
    (rows, w.len() / rows.max(1))
}

/// Update `state` by power iteration and return `w / sigma`.
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralState, iterations: usize) -> Tensor {
    state.power_iterate(w, iterations);
    let s = state.sigma(w);
    Tensor::new(w.shape().to_vec(), w.data().iter().map(|x| x / s).collect())
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub spectral: Option<SpectralState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameters of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            spectral: None,
        });
        id
    }

    /// Register a weight that is spectrally normalized when used.
    pub fn add_spectral<R: Rng + ?Sized>(&mut self, name: impl Into<String>, value: Tensor, rng: &mut R) -> ParamId {
        let state = SpectralState::init(&value, rng);
        let id = self.add(name, value);
        self.params[id.0].spectral = Some(state);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                p.name,
                p.value.shape(),
                t.shape()
            )));
        }
        p.value = Arc::new(t);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Advance every spectral state by `iterations` power-iteration rounds.
    pub fn power_iterate_all(&mut self, iterations: usize) {
        for p in &mut self.params {
            if let Some(s) = &mut p.spectral {
                s.power_iterate(&p.value, iterations);
            }
        }
    }
}
