//! Central finite-difference verification of reverse-mode gradients.
//!
//! Everything here runs in `f64`. The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)`; the floor keeps
//! vanishing gradients from turning round-off into spurious failures.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

const REL_FLOOR: f64 = 1e-2;
const KINK_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per input tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Skip coordinates whose stencil straddles a non-differentiable point
    /// (ReLU, max). Only composite checks should enable this.
    pub allow_kinks: bool,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-4,
            max_coords: 48,
            allow_kinks: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        // a check that skipped most of its coordinates verified nothing
        self.max_rel_err < self.tol && self.checked > 0 && self.skipped_kinks * 10 <= self.checked
    }

    fn merge(&mut self, other: &CheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} {} max_rel_err={:.3e} checked={} skipped={}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.checked,
            self.skipped_kinks
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Uniform `[-1, 1]` tensor from a seeded generator.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = Uniform::new_inclusive(-1.0, 1.0);
    Tensor::from_fn(shape.to_vec(), |_| d.sample(rng))
}

/// Contracts `out` against a fixed random weighting so every output element
/// contributes with a distinct coefficient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_tensor(g.shape(out), &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

struct Probe<'a> {
    eval: &'a mut dyn FnMut() -> Result<f64>,
}

impl Probe<'_> {
    /// Compares one coordinate; `set` writes a value into the probed slot.
    fn coordinate(
        &mut self,
        x0: f64,
        analytic: f64,
        f0: f64,
        opts: &CheckOptions,
        set: &mut dyn FnMut(f64),
        report: &mut CheckReport,
    ) -> Result<()> {
        let h = opts.eps;
        set(x0 + h);
        let fp = (self.eval)()?;
        set(x0 - h);
        let fm = (self.eval)()?;
        set(x0);
        let numeric = (fp - fm) / (2.0 * h);
        if opts.allow_kinks {
            // second differences of a smooth function shrink 4x per halving
            // of the step; a kink inside the stencil breaks that at every
            // position
            let mut second = [fp - 2.0 * f0 + fm, 0.0, 0.0];
            for (k, div) in [(1, 2.0), (2, 4.0)] {
                set(x0 + h / div);
                let p = (self.eval)()?;
                set(x0 - h / div);
                let m = (self.eval)()?;
                second[k] = p - 2.0 * f0 + m;
            }
            set(x0);
            let misfit = (second[0] - 4.0 * second[1]).abs() + (second[1] - 4.0 * second[2]).abs();
            if misfit > KINK_TOL * f0.abs().max(1.0) {
                report.skipped_kinks += 1;
                return Ok(());
            }
        }
        report.max_rel_err = report.max_rel_err.max(relative_error(analytic, numeric));
        report.checked += 1;
        Ok(())
    }
}

/// Checks d loss / d input for every input of a scalar function.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.item(loss);
        if !grad {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .map(|&v| {
                grads
                    .of(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))
            })
            .collect();
        Ok((value, Some(gs)))
    };
    let (f0, analytic) = run(inputs, true)?;
    let analytic = analytic.expect("requested");
    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
        tol: opts.tol,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut vals = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        for c in coords(a.numel(), opts.max_coords, &mut rng) {
            let x0 = vals[k].data()[c];
            let cell = std::cell::RefCell::new(&mut vals);
            let mut eval = || run(cell.borrow().as_slice(), false).map(|r| r.0);
            let mut probe = Probe { eval: &mut eval };
            let mut set = |v: f64| cell.borrow_mut()[k].data_mut()[c] = v;
            probe.coordinate(x0, a.data()[c], f0, opts, &mut set, &mut report)?;
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar model loss w.r.t. trainable parameters of
/// `store`. Frozen parameters are not probed.
pub fn check_params<F>(name: &str, store: &ParamStore<f64>, f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let f0 = g.item(loss);
    let grads = g.backward(loss)?.by_param(&g);
    let mut total = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
        tol: opts.tol,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    if names.is_empty() {
        return Err(Error::Invalid(format!("{name}: no trainable parameters to check")));
    }
    for pname in names {
        let numel = work.tensor(&pname)?.numel();
        let zeros = Tensor::zeros(work.tensor(&pname)?.shape().to_vec());
        let analytic = grads.get(&pname).unwrap_or(&zeros).clone();
        let mut part = CheckReport {
            name: pname.clone(),
            max_rel_err: 0.0,
            checked: 0,
            skipped_kinks: 0,
            tol: opts.tol,
        };
        for c in coords(numel, opts.max_coords, &mut rng) {
            let x0 = work.tensor(&pname)?.data()[c];
            let cell = std::cell::RefCell::new(&mut work);
            let mut eval = || {
                let mut g = Graph::new();
                let l = f(&mut g, &cell.borrow())?;
                Ok(g.item(l))
            };
            let mut probe = Probe { eval: &mut eval };
            let mut set = |v: f64| {
                if let Some(p) = cell.borrow_mut().get_mut(&pname) {
                    p.tensor.data_mut()[c] = v;
                }
            };
            probe.coordinate(x0, analytic.data()[c], f0, opts, &mut set, &mut part)?;
        }
        total.merge(&part);
    }
    Ok(total)
}
