//! Bound-constrained derivative-free maximization under an evaluation budget.
//!
//! Two solvers are provided:
//!
//! * [`Solver::Cobyla`] keeps a simplex of `n + 1` interpolation points, fits
//!   a linear model through them and steps to the maximizer of that model over
//!   the intersection of the trust region (a ball of radius `rho`) and the
//!   box. The radius only shrinks, from `rho_begin` to `rho_end`, in the style
//!   of Powell's COBYLA.
//! * [`Solver::NelderMead`] is the adaptive-parameter simplex method with
//!   trial points clipped into the box.
//!
//! Every point handed to the objective lies inside the bounds. Objective
//! values are cached by exact point; a cache hit costs no budget.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BUDGET: usize = 250;
pub const DEFAULT_RHO_BEGIN: f64 = 0.25;
pub const DEFAULT_RHO_END: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    Cobyla,
    NelderMead,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Cobyla => "cobyla",
            Solver::NelderMead => "nelder-mead",
        })
    }
}

impl FromStr for Solver {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cobyla" => Ok(Solver::Cobyla),
            "nelder-mead" | "nm" => Ok(Solver::NelderMead),
            other => Err(format!("unknown solver {other:?} (expected cobyla or nelder-mead)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationProblem {
    pub initial: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Maximum number of (uncached) objective evaluations.
    pub budget: usize,
    pub seed: u64,
    pub solver: Solver,
    pub rho_begin: f64,
    pub rho_end: f64,
    pub record_trace: bool,
}

impl OptimizationProblem {
    /// A problem over the unit box `[0, 1]^n` with default solver settings.
    pub fn unit_box(initial: Vec<f64>, budget: usize) -> Self {
        let n = initial.len();
        Self {
            initial,
            lower: vec![0.0; n],
            upper: vec![1.0; n],
            budget,
            seed: 0,
            solver: Solver::Cobyla,
            rho_begin: DEFAULT_RHO_BEGIN,
            rho_end: DEFAULT_RHO_END,
            record_trace: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    fn validate(&self) -> Result<(), String> {
        let n = self.dim();
        if n == 0 {
            return Err("problem has dimension 0".into());
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(format!(
                "bounds have lengths {}/{} for dimension {n}",
                self.lower.len(),
                self.upper.len()
            ));
        }
        if self.budget == 0 {
            return Err("budget must be at least 1".into());
        }
        for i in 0..n {
            let (lo, hi, x) = (self.lower[i], self.upper[i], self.initial[i]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(format!("coordinate {i}: invalid bounds [{lo}, {hi}]"));
            }
            if !(lo..=hi).contains(&x) {
                return Err(format!("coordinate {i}: initial value {x} outside [{lo}, {hi}]"));
            }
        }
        if !(self.rho_begin > 0.0 && self.rho_end > 0.0 && self.rho_end <= self.rho_begin) {
            return Err(format!(
                "trust-region radii must satisfy 0 < rho_end <= rho_begin (got {} / {})",
                self.rho_end, self.rho_begin
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
    pub trace: Option<Vec<(Vec<f64>, f64)>>,
}

#[derive(Debug, thiserror::Error)]
pub enum DfoError<E> {
    #[error("invalid optimization problem: {0}")]
    InvalidProblem(String),
    #[error("objective failed after {evaluations} completed evaluations: {source}")]
    Objective { source: E, evaluations: usize },
    #[error("objective returned non-finite value {value} after {evaluations} evaluations")]
    NonFinite { value: f64, evaluations: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("dimension mismatch: x has {x}, lower {lower}, upper {upper}")]
pub struct DimensionMismatch {
    pub x: usize,
    pub lower: usize,
    pub upper: usize,
}

/// Projects `x` onto the box `[lo, hi]` coordinate-wise.
pub fn clip_to_bounds(x: &[f64], lo: &[f64], hi: &[f64]) -> Result<Vec<f64>, DimensionMismatch> {
    if x.len() != lo.len() || x.len() != hi.len() {
        return Err(DimensionMismatch {
            x: x.len(),
            lower: lo.len(),
            upper: hi.len(),
        });
    }
    Ok(x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| h.min(l.max(v)))
        .collect())
}

/// Maximizes `objective` over the problem's box.
pub fn optimize<E, F>(
    problem: &OptimizationProblem,
    objective: F,
) -> Result<OptimizationResult, DfoError<E>>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    problem.validate().map_err(DfoError::InvalidProblem)?;
    let mut ev = Evaluator::new(problem, objective);
    let x0 = problem.initial.clone();
    ev.eval(&x0)?;
    match problem.solver {
        Solver::Cobyla => cobyla(problem, &mut ev)?,
        Solver::NelderMead => nelder_mead(problem, &mut ev)?,
    }
    Ok(ev.finish())
}

/// Counting, caching, bound-enforcing wrapper around the objective.
struct Evaluator<'a, F> {
    objective: F,
    lower: &'a [f64],
    upper: &'a [f64],
    budget: usize,
    used: usize,
    cache: HashMap<Vec<u64>, f64>,
    best_point: Vec<f64>,
    best_value: f64,
    trace: Option<Vec<(Vec<f64>, f64)>>,
}

#[derive(Clone, Copy)]
struct Eval {
    value: f64,
    fresh: bool,
}

impl<'a, F> Evaluator<'a, F> {
    fn new(problem: &'a OptimizationProblem, objective: F) -> Self {
        Self {
            objective,
            lower: &problem.lower,
            upper: &problem.upper,
            budget: problem.budget,
            used: 0,
            cache: HashMap::new(),
            best_point: problem.initial.clone(),
            best_value: f64::NEG_INFINITY,
            trace: problem.record_trace.then(Vec::new),
        }
    }

    fn exhausted(&self) -> bool {
        self.used >= self.budget
    }

    fn clip(&self, x: &[f64]) -> Vec<f64> {
        clip_to_bounds(x, self.lower, self.upper).expect("dimensions checked")
    }

    /// Returns `None` once the budget is spent and `x` is not cached.
    fn eval<E>(&mut self, x: &[f64]) -> Result<Option<Eval>, DfoError<E>>
    where
        F: FnMut(&[f64]) -> Result<f64, E>,
    {
        let x = self.clip(x);
        // -0.0 and 0.0 are the same point
        let key: Vec<u64> = x.iter().map(|v| (v + 0.0).to_bits()).collect();
        if let Some(&value) = self.cache.get(&key) {
            return Ok(Some(Eval { value, fresh: false }));
        }
        if self.exhausted() {
            return Ok(None);
        }
        let value = (self.objective)(&x).map_err(|source| DfoError::Objective {
            source,
            evaluations: self.used,
        })?;
        self.used += 1;
        if !value.is_finite() {
            return Err(DfoError::NonFinite {
                value,
                evaluations: self.used,
            });
        }
        self.cache.insert(key, value);
        if value > self.best_value {
            self.best_value = value;
            self.best_point = x.clone();
        }
        if let Some(trace) = &mut self.trace {
            trace.push((x, value));
        }
        Ok(Some(Eval { value, fresh: true }))
    }

    fn finish(self) -> OptimizationResult {
        OptimizationResult {
            best_point: self.best_point,
            best_value: self.best_value,
            evaluations: self.used,
            trace: self.trace,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for a square row-major `A` by Gaussian elimination with
/// partial pivoting. `None` when `A` is numerically singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

/// Maximizer of `g·d` over `{‖d‖ ≤ rho} ∩ {lo ≤ x + d ≤ hi}`.
fn box_ball_step(x: &[f64], g: &[f64], rho: f64, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n];
    let mut free: Vec<usize> = (0..n).filter(|&i| g[i] != 0.0).collect();
    let mut remaining = rho * rho;
    while !free.is_empty() && remaining > 0.0 {
        let norm = free.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let r = remaining.sqrt();
        let mut violated = Vec::new();
        for &i in &free {
            let di = r * g[i] / norm;
            if x[i] + di > hi[i] || x[i] + di < lo[i] {
                violated.push(i);
            }
        }
        if violated.is_empty() {
            for &i in &free {
                d[i] = r * g[i] / norm;
            }
            break;
        }
        for &i in &violated {
            d[i] = if g[i] > 0.0 { hi[i] - x[i] } else { lo[i] - x[i] };
            remaining -= d[i] * d[i];
        }
        free.retain(|i| !violated.contains(i));
    }
    d
}

/// Step of length at most `h` along coordinate `i` that stays in the box,
/// going whichever way has more room when `+h` does not fit.
fn axis_step(x: f64, h: f64, lo: f64, hi: f64) -> f64 {
    if x + h <= hi {
        h
    } else if x - h >= lo {
        -h
    } else if hi - x >= x - lo {
        hi - x
    } else {
        lo - x
    }
}

struct Simplex {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl Simplex {
    fn best(&self) -> usize {
        let mut b = 0;
        for i in 1..self.values.len() {
            if self.values[i] > self.values[b] {
                b = i;
            }
        }
        b
    }

    /// Edge matrix relative to vertex `b`, rows ordered by vertex index
    /// skipping `b`, together with the row→vertex map.
    fn edges(&self, b: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let rows: Vec<usize> = (0..self.points.len()).filter(|&i| i != b).collect();
        let mat = rows
            .iter()
            .map(|&i| {
                self.points[i]
                    .iter()
                    .zip(&self.points[b])
                    .map(|(p, q)| p - q)
                    .collect()
            })
            .collect();
        (mat, rows)
    }
}

/// Maps points of the free-coordinate subspace back to full points.
struct Subspace {
    free: Vec<usize>,
    base: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Subspace {
    fn new(problem: &OptimizationProblem) -> Self {
        // fixed coordinates (lo == hi) are not optimized
        let free: Vec<usize> = (0..problem.dim())
            .filter(|&i| problem.upper[i] > problem.lower[i])
            .collect();
        let pick = |v: &[f64]| free.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let lower = pick(&problem.lower);
        let upper = pick(&problem.upper);
        let base = clip_to_bounds(&problem.initial, &problem.lower, &problem.upper)
            .expect("validated dimensions");
        Self {
            free,
            base,
            lower,
            upper,
        }
    }

    fn dim(&self) -> usize {
        self.free.len()
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| x[i]).collect()
    }

    fn lift(&self, sub: &[f64]) -> Vec<f64> {
        let mut x = self.base.clone();
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = sub[k];
        }
        x
    }

    fn clip(&self, sub: &[f64]) -> Vec<f64> {
        clip_to_bounds(sub, &self.lower, &self.upper).expect("same dims")
    }

    fn eval<E, F>(&self, ev: &mut Evaluator<'_, F>, sub: &[f64]) -> Result<Option<Eval>, DfoError<E>>
    where
        F: FnMut(&[f64]) -> Result<f64, E>,
    {
        ev.eval(&self.lift(sub))
    }

    /// Axis-aligned simplex of radius `rho` around an evaluated centre.
    fn simplex<E, F>(
        &self,
        ev: &mut Evaluator<'_, F>,
        centre: &[f64],
        centre_value: f64,
        rho: f64,
    ) -> Result<Option<Simplex>, DfoError<E>>
    where
        F: FnMut(&[f64]) -> Result<f64, E>,
    {
        let mut points = vec![centre.to_vec()];
        let mut values = vec![centre_value];
        for i in 0..self.dim() {
            let mut p = centre.to_vec();
            p[i] += axis_step(centre[i], rho, self.lower[i], self.upper[i]);
            let Some(e) = self.eval(ev, &p)? else {
                return Ok(None);
            };
            points.push(p);
            values.push(e.value);
        }
        Ok(Some(Simplex { points, values }))
    }
}

fn cobyla<E, F>(problem: &OptimizationProblem, ev: &mut Evaluator<'_, F>) -> Result<(), DfoError<E>>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    let space = Subspace::new(problem);
    if space.dim() == 0 {
        return Ok(());
    }
    let (lo, hi) = (space.lower.clone(), space.upper.clone());
    let mut rho = problem.rho_begin;
    let x0 = space.project(&space.base);
    let Some(f0) = space.eval(ev, &x0)? else {
        return Ok(());
    };
    let Some(mut simplex) = space.simplex(ev, &x0, f0.value, rho)? else {
        return Ok(());
    };

    let max_iters = 50 * problem.budget + 1000;
    for _ in 0..max_iters {
        if ev.exhausted() {
            break;
        }
        let b = simplex.best();
        let xb = simplex.points[b].clone();
        let fb = simplex.values[b];
        let (edges, rows) = simplex.edges(b);
        let df: Vec<f64> = rows.iter().map(|&i| simplex.values[i] - fb).collect();

        let Some(g) = solve(edges.clone(), df) else {
            // degenerate interpolation set: rebuild around the best point
            match space.simplex(ev, &xb, fb, rho)? {
                Some(s) => simplex = s,
                None => break,
            }
            continue;
        };

        let d = box_ball_step(&xb, &g, rho, &lo, &hi);
        let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dnorm >= 0.5 * rho {
            let trial: Vec<f64> = xb.iter().zip(&d).map(|(x, s)| x + s).collect();
            let trial = space.clip(&trial);
            let Some(e) = space.eval(ev, &trial)? else {
                break;
            };
            let predicted = dot(&g, &d);
            let ratio = if predicted > 0.0 {
                (e.value - fb) / predicted
            } else {
                0.0
            };
            if e.fresh {
                replace_vertex(&mut simplex, b, &edges, &rows, trial, e.value, rho);
                if ratio >= 0.1 {
                    continue;
                }
            }
        }

        // poor or no step: first repair geometry if a vertex drifted far away
        let b = simplex.best();
        let xb = simplex.points[b].clone();
        let far = (0..simplex.points.len())
            .filter(|&i| i != b)
            .max_by(|&i, &j| {
                dist(&simplex.points[i], &xb).total_cmp(&dist(&simplex.points[j], &xb))
            })
            .expect("simplex has at least two vertices");
        if dist(&simplex.points[far], &xb) > 2.0 * rho {
            if let Some(p) = geometry_point(&simplex, b, far, rho, &space) {
                let Some(e) = space.eval(ev, &p)? else {
                    break;
                };
                if e.fresh {
                    simplex.points[far] = p;
                    simplex.values[far] = e.value;
                    continue;
                }
            }
            let fb = simplex.values[b];
            match space.simplex(ev, &xb, fb, rho)? {
                Some(s) => simplex = s,
                None => break,
            }
            continue;
        }

        if rho <= problem.rho_end {
            break;
        }
        rho *= 0.5;
        if rho <= 1.5 * problem.rho_end {
            rho = problem.rho_end;
        }
    }
    Ok(())
}

/// Replacement for vertex `far`: a point at distance `rho` from the best
/// vertex, orthogonal to all other edges so the simplex regains volume.
fn geometry_point(
    simplex: &Simplex,
    b: usize,
    far: usize,
    rho: f64,
    space: &Subspace,
) -> Option<Vec<f64>> {
    let (edges, rows) = simplex.edges(b);
    let slot = rows.iter().position(|&i| i == far)?;
    let mut unit = vec![0.0; edges.len()];
    unit[slot] = 1.0;
    let dir = solve(edges, unit)?;
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let xb = &simplex.points[b];
    let side = |sign: f64| {
        let raw: Vec<f64> = xb
            .iter()
            .zip(&dir)
            .map(|(x, u)| x + sign * rho * u / norm)
            .collect();
        space.clip(&raw)
    };
    let (plus, minus) = (side(1.0), side(-1.0));
    // whichever side kept more of its length after clipping
    let p = if dist(&plus, xb) >= dist(&minus, xb) {
        plus
    } else {
        minus
    };
    (dist(&p, xb) > 0.1 * rho).then_some(p)
}

/// Puts a freshly evaluated trial point into the simplex, choosing the vertex
/// whose removal best preserves the simplex volume, with a preference for
/// vertices far from the trial point.
fn replace_vertex(
    simplex: &mut Simplex,
    b: usize,
    edges: &[Vec<f64>],
    rows: &[usize],
    trial: Vec<f64>,
    value: f64,
    rho: f64,
) {
    let improved = value > simplex.values[b];
    let step: Vec<f64> = trial
        .iter()
        .zip(&simplex.points[b])
        .map(|(t, x)| t - x)
        .collect();
    // step = Σ w_r edge_r ; replacing vertex rows[r] scales the volume by |w_r|,
    // replacing b scales it by |1 − Σ w|
    let Some(w) = solve(transpose(edges), step) else {
        // cannot judge geometry; replace the worst vertex if the trial beats it
        let worst = (0..simplex.values.len())
            .min_by(|&i, &j| simplex.values[i].total_cmp(&simplex.values[j]))
            .expect("non-empty");
        if value > simplex.values[worst] {
            simplex.points[worst] = trial;
            simplex.values[worst] = value;
        }
        return;
    };
    let weight = |i: usize| {
        let d = dist(&simplex.points[i], &trial) / rho;
        d.max(1.0).powi(2)
    };
    let mut best_slot = None;
    let mut best_score = 0.0;
    for (r, &i) in rows.iter().enumerate() {
        let score = w[r].abs() * weight(i);
        if score > best_score {
            best_score = score;
            best_slot = Some(i);
        }
    }
    if improved {
        let score = (1.0 - w.iter().sum::<f64>()).abs() * weight(b);
        if score > best_score {
            best_score = score;
            best_slot = Some(b);
        }
    }
    let threshold = if improved { 1e-8 } else { 1.0 };
    if let Some(i) = best_slot {
        if best_score >= threshold {
            simplex.points[i] = trial;
            simplex.values[i] = value;
        }
    }
}

fn nelder_mead<E, F>(
    problem: &OptimizationProblem,
    ev: &mut Evaluator<'_, F>,
) -> Result<(), DfoError<E>>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    let n = problem.dim();
    let nf = n as f64;
    // adaptive coefficients for higher dimensions
    let (alpha, gamma, rho_c, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);

    let x0 = ev.clip(&problem.initial);
    let f0 = match ev.eval(&x0)? {
        Some(e) => e.value,
        None => return Ok(()),
    };
    let mut pts = vec![x0.clone()];
    let mut vals = vec![f0];
    for i in 0..n {
        let jitter: f64 = rng.random_range(-0.1..0.1);
        let h = problem.rho_begin * (1.0 + jitter);
        let mut p = x0.clone();
        p[i] += axis_step(x0[i], h, problem.lower[i], problem.upper[i]);
        let Some(e) = ev.eval(&p)? else {
            return Ok(());
        };
        pts.push(ev.clip(&p));
        vals.push(e.value);
    }

    let max_iters = 50 * problem.budget + 1000;
    for _ in 0..max_iters {
        if ev.exhausted() {
            break;
        }
        // descending by value, stable on ties
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let size = pts[1..]
            .iter()
            .map(|p| dist(p, &pts[0]))
            .fold(0.0f64, f64::max);
        if size < problem.rho_end {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| pts[..n].iter().map(|p| p[k]).sum::<f64>() / nf)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let raw: Vec<f64> = centroid
                .iter()
                .zip(&pts[n])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clip_to_bounds(&raw, &problem.lower, &problem.upper).expect("same dims")
        };

        let xr = along(alpha);
        let Some(fr) = ev.eval(&xr)?.map(|e| e.value) else {
            break;
        };
        if fr > vals[0] {
            let xe = along(alpha * gamma);
            let Some(fe) = ev.eval(&xe)?.map(|e| e.value) else {
                break;
            };
            if fe > fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr > vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, outside) = if fr > vals[n] {
            (along(alpha * rho_c), true)
        } else {
            (along(-rho_c), false)
        };
        let Some(fc) = ev.eval(&xc)?.map(|e| e.value) else {
            break;
        };
        if (outside && fc >= fr) || (!outside && fc > vals[n]) {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=n {
            let p: Vec<f64> = pts[0]
                .iter()
                .zip(&pts[i])
                .map(|(b, x)| b + sigma * (x - b))
                .collect();
            let Some(e) = ev.eval(&p)? else {
                return Ok(());
            };
            pts[i] = p;
            vals[i] = e.value;
        }
    }
    Ok(())
}
