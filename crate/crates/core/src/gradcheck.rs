//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of the backward rules it is checking.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::nn::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    pub rtol: f64,
    /// Absolute slack for gradients that are numerically zero.
    pub atol: f64,
    /// Check at most this many coordinates (sampled deterministically); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }

    #[track_caller]
    pub fn assert_ok(&self) {
        assert!(self.passed(), "gradient check failed: {:?}", self);
    }

    fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.mismatches.extend(other.mismatches);
    }
}

fn pick_coords(n: usize, cfg: &GradCheck) -> Vec<usize> {
    match cfg.max_coords {
        Some(k) if k < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            SplitMix64::new(cfg.seed).shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn compare(coords: &[usize], analytic: &[f64], numeric: &[f64], cfg: &GradCheck) -> GradReport {
    let mut report = GradReport {
        checked: coords.len(),
        max_rel_err: 0.0,
        mismatches: Vec::new(),
    };
    for (k, &i) in coords.iter().enumerate() {
        let (a, n) = (analytic[i], numeric[k]);
        let err = libm::fabs(a - n);
        let scale = libm::fabs(a).max(libm::fabs(n));
        if scale > 0.0 {
            report.max_rel_err = report.max_rel_err.max(err / scale);
        }
        if err > cfg.atol + cfg.rtol * scale {
            report.mismatches.push(Mismatch {
                index: i,
                analytic: a,
                numeric: n,
            });
        }
    }
    report
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        bail!(
            Contract,
            "function under check must return a scalar, got {:?}",
            t.shape()
        );
    }
    Ok(t.data()[0])
}

/// Checks `d f(x) / d x` for a scalar-valued `f` built on a fresh tape.
pub fn check_gradient<F>(x: &Tensor, cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    input_gradient(Tape::new, x, cfg, f)
}

/// Like [`check_gradient`], but on tapes preloaded with the parameters of
/// `store` (held constant), so `f` may run a model on `x`.
pub fn check_input_gradient<F>(store: &ParamStore, x: &Tensor, cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    input_gradient(|| Tape::with_params(store, false), x, cfg, f)
}

fn input_gradient<T, F>(fresh: T, x: &Tensor, cfg: GradCheck, f: F) -> Result<GradReport>
where
    T: Fn() -> Tape,
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = fresh();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| alloc::vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = fresh();
        let v = tape.leaf(t.clone(), false);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let coords = pick_coords(x.len(), &cfg);
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in &coords {
        let orig = x.data()[i];
        probe.set_flat(i, orig + cfg.step)?;
        let up = eval(&probe)?;
        probe.set_flat(i, orig - cfg.step)?;
        let down = eval(&probe)?;
        probe.set_flat(i, orig)?;
        numeric.push((up - down) / (2.0 * cfg.step));
    }
    Ok(compare(&coords, &analytic, &numeric, &cfg))
}

/// Checks gradients of a scalar model loss with respect to stored parameters.
///
/// `f` receives a tape whose first nodes are the parameters of `store`
/// (see [`Tape::with_params`]).
pub fn check_param_gradients<F>(store: &ParamStore, params: &[ParamId], cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::with_params(store, true);
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;

    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        mismatches: Vec::new(),
    };
    let mut probe = store.clone();
    for (n, &id) in params.iter().enumerate() {
        let value = store.get(id);
        let analytic = tape
            .grad(tape.param(id))
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; value.len()]);
        let sub = GradCheck {
            seed: cfg.seed.wrapping_add(n as u64),
            ..cfg
        };
        let coords = pick_coords(value.len(), &sub);
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = value.data()[i];
            let mut run = |delta: f64| -> Result<f64> {
                probe.get_mut(id).set_flat(i, orig + delta)?;
                let mut t = Tape::with_params(&probe, false);
                let out = f(&mut t, &probe)?;
                scalar_of(&t, out)
            };
            let up = run(cfg.step)?;
            let down = run(-cfg.step)?;
            probe.get_mut(id).set_flat(i, orig)?;
            numeric.push((up - down) / (2.0 * cfg.step));
        }
        report.merge(compare(&coords, &analytic, &numeric, &sub));
    }
    Ok(report)
}

/// Compares the analytic directional derivative `∇f · v` with a central
/// difference along `directions` random unit directions spanning all of
/// `params` at once.
pub fn check_directional<F>(
    store: &ParamStore,
    params: &[ParamId],
    cfg: GradCheck,
    directions: usize,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::with_params(store, true);
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| {
            tape.grad(tape.param(id))
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; store.get(id).len()])
        })
        .collect();

    let mut rng = SplitMix64::new(cfg.seed);
    let mut analytic = Vec::with_capacity(directions);
    let mut numeric = Vec::with_capacity(directions);
    for _ in 0..directions {
        let dir: Vec<Vec<f64>> = params
            .iter()
            .map(|&id| (0..store.get(id).len()).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let norm = libm::sqrt(dir.iter().flatten().map(|v| v * v).sum::<f64>());
        analytic.push(
            grads
                .iter()
                .flatten()
                .zip(dir.iter().flatten())
                .map(|(g, d)| g * d / norm)
                .sum::<f64>(),
        );
        let run = |sign: f64| -> Result<f64> {
            let mut probe = store.clone();
            for (&id, d) in params.iter().zip(&dir) {
                let t = probe.get_mut(id);
                for (i, dv) in d.iter().enumerate() {
                    let v = t.data()[i] + sign * cfg.step * dv / norm;
                    t.set_flat(i, v)?;
                }
            }
            let mut t = Tape::with_params(&probe, false);
            let out = f(&mut t, &probe)?;
            scalar_of(&t, out)
        };
        numeric.push((run(1.0)? - run(-1.0)?) / (2.0 * cfg.step));
    }
    let coords: Vec<usize> = (0..directions).collect();
    Ok(compare(&coords, &analytic, &numeric, &cfg))
}
