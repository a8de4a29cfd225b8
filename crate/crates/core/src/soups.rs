//! Fusion of a pool of finetuned checkpoints: uniform soup, greedy soup and
//! the manifold mixing soup.
//!
//! The manifold mixing soup walks the pool in descending validation accuracy.
//! Starting from the best model `Ψ = θ_0` with `k = 1`, each candidate `θ_i`
//! is first screened with the approximate-average gate
//!
//! ```text
//! Ψ̃ = k/(k+1)·Ψ + 1/(k+1)·θ_i,   pass iff ValAcc(Ψ̃) > τ·ValAcc(Ψ)
//! ```
//!
//! and, when it passes, mixed in component by component with factors
//! `λ ∈ [0,1]^m` chosen by a derivative-free optimizer that maximizes
//! `ValAcc(Ψ'(λ))`. The mix replaces `Ψ` only if it strictly improves the
//! validation accuracy.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::dfo::{self, DfoError, OptimizationProblem, Solver};
use crate::partition::{mix_components, MixingVector, PartitionError, PartitionSpec};
use crate::seeds::derive_seed;
use crate::tensor_store::{lincomb, mean, ParameterSet, TensorError};

pub const DEFAULT_TAU: f64 = 0.998;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("evaluator schema mismatch: {0}")]
    Schema(String),
    #[error("evaluation failed: {0}")]
    Failed(String),
}

/// Validation-accuracy oracle. Must be deterministic: the same parameters
/// always produce the same accuracy.
pub trait Evaluator {
    fn accuracy(&self, params: &ParameterSet) -> Result<f64, EvalError>;

    fn dataset_id(&self) -> &str {
        "unnamed"
    }
}

impl<T: Evaluator + ?Sized> Evaluator for &T {
    fn accuracy(&self, params: &ParameterSet) -> Result<f64, EvalError> {
        (**self).accuracy(params)
    }

    fn dataset_id(&self) -> &str {
        (**self).dataset_id()
    }
}

/// Adapts a closure into an [`Evaluator`].
pub struct FnEvaluator<F> {
    f: F,
    id: String,
}

impl<F> FnEvaluator<F>
where
    F: Fn(&ParameterSet) -> Result<f64, EvalError>,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { f, id: id.into() }
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&ParameterSet) -> Result<f64, EvalError>,
{
    fn accuracy(&self, params: &ParameterSet) -> Result<f64, EvalError> {
        (self.f)(params)
    }

    fn dataset_id(&self) -> &str {
        &self.id
    }
}

/// Wraps an evaluator and counts calls.
pub struct CountingEvaluator<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E: Evaluator> CountingEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: Evaluator> Evaluator for CountingEvaluator<E> {
    fn accuracy(&self, params: &ParameterSet) -> Result<f64, EvalError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.accuracy(params)
    }

    fn dataset_id(&self) -> &str {
        self.inner.dataset_id()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SoupError {
    #[error("model pool is empty")]
    EmptyPool,
    #[error("duplicate model id {0:?}")]
    DuplicateId(String),
    #[error("model {id:?}: validation accuracy {value} outside [0, 1]")]
    InvalidAccuracy { id: String, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("optimizer: {0}")]
    Optimizer(String),
}

/// A soup run that aborted part-way; `partial` holds the trace up to the
/// failing step when one had been started.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct SoupFailure {
    #[source]
    pub error: SoupError,
    pub partial: Option<Box<SoupReport>>,
}

impl From<SoupError> for SoupFailure {
    fn from(error: SoupError) -> Self {
        Self {
            error,
            partial: None,
        }
    }
}

fn check_accuracy(id: &str, value: f64) -> Result<f64, SoupError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(SoupError::InvalidAccuracy {
            id: id.to_string(),
            value,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolMember {
    pub id: String,
    pub params: ParameterSet,
    pub val_acc: Option<f64>,
}

impl PoolMember {
    pub fn new(id: impl Into<String>, params: ParameterSet, val_acc: Option<f64>) -> Self {
        Self {
            id: id.into(),
            params,
            val_acc,
        }
    }
}

/// Ingredient checkpoints sharing one schema. When `is_sorted`, accuracies
/// are present and non-increasing, so member 0 is the best model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPool {
    members: Vec<PoolMember>,
    sorted: bool,
}

impl ModelPool {
    pub fn new(members: Vec<PoolMember>) -> Result<Self, SoupError> {
        let first = members.first().ok_or(SoupError::EmptyPool)?;
        for (i, m) in members.iter().enumerate() {
            first.params.check_same_schema(&m.params)?;
            if members[..i].iter().any(|o| o.id == m.id) {
                return Err(SoupError::DuplicateId(m.id.clone()));
            }
            if let Some(acc) = m.val_acc {
                check_accuracy(&m.id, acc)?;
            }
        }
        Ok(Self {
            members,
            sorted: false,
        })
    }

    pub fn members(&self) -> &[PoolMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.id.clone()).collect()
    }
}

/// Fills in missing accuracies with `eval` and stably sorts the pool by
/// descending validation accuracy; ties keep their input order. Returns the
/// sorted pool and the number of evaluator calls made.
pub fn sort_pool<E: Evaluator>(pool: ModelPool, eval: &E) -> Result<(ModelPool, usize), SoupError> {
    let mut calls = 0;
    let mut members = pool.members;
    for m in &mut members {
        if m.val_acc.is_none() {
            let acc = eval.accuracy(&m.params)?;
            calls += 1;
            m.val_acc = Some(check_accuracy(&m.id, acc)?);
        }
    }
    members.sort_by(|a, b| {
        b.val_acc
            .unwrap()
            .partial_cmp(&a.val_acc.unwrap())
            .expect("accuracies are finite")
    });
    Ok((
        ModelPool {
            members,
            sorted: true,
        },
        calls,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Uniform,
    Greedy,
    Manifold,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Uniform => "uniform",
            Method::Greedy => "greedy",
            Method::Manifold => "manifold",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Method::Uniform),
            "greedy" => Ok(Method::Greedy),
            "manifold" => Ok(Method::Manifold),
            other => Err(format!(
                "unknown method {other:?} (expected uniform, greedy or manifold)"
            )),
        }
    }
}

/// One examined ingredient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    /// ValAcc of the approximate average Ψ̃ (manifold soup only).
    pub gate_acc: Option<f64>,
    pub gate_pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_star: Option<Vec<f64>>,
    /// ValAcc of the soup before this candidate was considered.
    pub acc_before: Option<f64>,
    /// ValAcc of the candidate soup (Ψ'* or the trial average), if built.
    pub acc_after: Option<f64>,
    pub accepted: bool,
    #[serde(default)]
    pub optimizer_evals: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub sorting: usize,
    pub gates: usize,
    pub optimizer: usize,
    pub acceptance: usize,
    pub total: usize,
}

impl EvalCounts {
    fn reconcile(&mut self) {
        self.total = self.sorting + self.gates + self.optimizer + self.acceptance;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub k: usize,
    pub val_acc: Option<f64>,
    /// θ_0 followed by every accepted candidate.
    pub ingredients: Vec<String>,
    pub checkpoint_path: Option<String>,
}

/// Complete trace of a soup run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupReport {
    pub method: Method,
    pub tau: Option<f64>,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solver: Option<Solver>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub components: Option<usize>,
    pub dataset: Option<String>,
    pub ordering: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    #[serde(rename = "final")]
    pub final_state: FinalRecord,
    pub evaluations: EvalCounts,
}

impl SoupReport {
    fn new(method: Method, ordering: Vec<String>) -> Self {
        let first = ordering.first().cloned().into_iter().collect();
        Self {
            method,
            tau: None,
            budget: None,
            seed: None,
            solver: None,
            components: None,
            dataset: None,
            ordering,
            candidates: Vec::new(),
            final_state: FinalRecord {
                k: 1,
                val_acc: None,
                ingredients: first,
                checkpoint_path: None,
            },
            evaluations: EvalCounts::default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn fail(mut self, error: impl Into<SoupError>) -> SoupFailure {
        self.evaluations.reconcile();
        SoupFailure {
            error: error.into(),
            partial: Some(Box::new(self)),
        }
    }
}

/// Elementwise mean of every pool member. No evaluator is involved.
pub fn uniform_soup(pool: &ModelPool) -> Result<(ParameterSet, SoupReport), SoupFailure> {
    let refs: Vec<&ParameterSet> = pool.members().iter().map(|m| &m.params).collect();
    let fused = mean(&refs).map_err(SoupError::from)?;
    let mut report = SoupReport::new(Method::Uniform, pool.ids());
    for m in &pool.members()[1..] {
        report.candidates.push(CandidateRecord {
            id: m.id.clone(),
            gate_acc: None,
            gate_pass: None,
            lambda_star: None,
            acc_before: None,
            acc_after: None,
            accepted: true,
            optimizer_evals: 0,
        });
    }
    report.final_state.k = pool.len();
    report.final_state.ingredients = pool.ids();
    Ok((fused, report))
}

/// Greedy soup: sequentially add each model (best first) to a uniform
/// average, keeping it only if the average's accuracy strictly improves.
pub fn greedy_soup<E: Evaluator>(
    pool: ModelPool,
    eval: &E,
) -> Result<(ParameterSet, SoupReport), SoupFailure> {
    let (pool, sort_calls) = sort_pool(pool, eval)?;
    let members = pool.members();
    let mut report = SoupReport::new(Method::Greedy, pool.ids());
    report.dataset = Some(eval.dataset_id().to_string());
    report.evaluations.sorting = sort_calls;

    let mut ingredients: Vec<&ParameterSet> = vec![&members[0].params];
    let mut soup = members[0].params.clone();
    let mut soup_acc = members[0].val_acc.expect("sorted pool has accuracies");

    for m in &members[1..] {
        let mut trial_set = ingredients.clone();
        trial_set.push(&m.params);
        let trial = match mean(&trial_set) {
            Ok(t) => t,
            Err(e) => return Err(report.fail(e)),
        };
        let acc = match eval.accuracy(&trial) {
            Ok(a) => a,
            Err(e) => return Err(report.fail(e)),
        };
        report.evaluations.acceptance += 1;
        let accepted = acc > soup_acc;
        report.candidates.push(CandidateRecord {
            id: m.id.clone(),
            gate_acc: None,
            gate_pass: None,
            lambda_star: None,
            acc_before: Some(soup_acc),
            acc_after: Some(acc),
            accepted,
            optimizer_evals: 0,
        });
        if accepted {
            ingredients.push(&m.params);
            soup = trial;
            soup_acc = acc;
            report.final_state.ingredients.push(m.id.clone());
        }
    }
    report.final_state.k = ingredients.len();
    report.final_state.val_acc = Some(soup_acc);
    report.evaluations.reconcile();
    Ok((soup, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutcome {
    pub pass: bool,
    pub gate_acc: f64,
}

fn check_gate_args(k: usize, tau: f64) -> Result<(), SoupError> {
    if k == 0 {
        return Err(SoupError::InvalidArgument("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(SoupError::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    Ok(())
}

/// The approximate average `k/(k+1)·psi + 1/(k+1)·theta`.
pub fn approximate_average(
    psi: &ParameterSet,
    theta: &ParameterSet,
    k: usize,
) -> Result<ParameterSet, TensorError> {
    let kf = k as f64;
    lincomb(kf / (kf + 1.0), psi, 1.0 / (kf + 1.0), theta)
}

/// Gate with a known `ValAcc(psi)`; costs exactly one evaluation.
pub fn approx_average_gate_cached<E: Evaluator>(
    psi: &ParameterSet,
    psi_acc: f64,
    theta: &ParameterSet,
    k: usize,
    eval: &E,
    tau: f64,
) -> Result<GateOutcome, SoupError> {
    check_gate_args(k, tau)?;
    let approx = approximate_average(psi, theta, k)?;
    let gate_acc = eval.accuracy(&approx)?;
    Ok(GateOutcome {
        pass: gate_acc > tau * psi_acc,
        gate_acc,
    })
}

/// Gate that also evaluates `psi` (two evaluations).
pub fn approx_average_gate<E: Evaluator>(
    psi: &ParameterSet,
    theta: &ParameterSet,
    k: usize,
    eval: &E,
    tau: f64,
) -> Result<GateOutcome, SoupError> {
    check_gate_args(k, tau)?;
    let psi_acc = eval.accuracy(psi)?;
    approx_average_gate_cached(psi, psi_acc, theta, k, eval, tau)
}

/// Optimizer settings for one mixing step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingConfig {
    pub budget: usize,
    pub seed: u64,
    pub solver: Solver,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            budget: dfo::DEFAULT_BUDGET,
            seed: 0,
            solver: Solver::Cobyla,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingOutcome {
    pub lambda_star: MixingVector,
    pub params: ParameterSet,
    pub acc: f64,
    pub evaluations: usize,
}

/// Finds `λ* = argmax ValAcc(mix_components(psi, theta, spec, λ))` over
/// `[0,1]^m`, starting from `λ_j = k/(k+1)`.
pub fn optimize_mixing<E: Evaluator>(
    psi: &ParameterSet,
    theta: &ParameterSet,
    spec: &PartitionSpec,
    k: usize,
    eval: &E,
    config: &MixingConfig,
) -> Result<MixingOutcome, SoupError> {
    if k == 0 {
        return Err(SoupError::InvalidArgument("k must be at least 1".into()));
    }
    psi.check_same_schema(theta)?;
    spec.validate_for(psi)?;
    let kf = k as f64;
    let problem = OptimizationProblem::unit_box(vec![kf / (kf + 1.0); spec.m], config.budget)
        .with_seed(config.seed)
        .with_solver(config.solver);

    let result = dfo::optimize(&problem, |lambda: &[f64]| -> Result<f64, SoupError> {
        let lambda = MixingVector::new(lambda.to_vec())?;
        let mixed = mix_components(psi, theta, spec, &lambda)?;
        Ok(eval.accuracy(&mixed)?)
    })
    .map_err(|e| match e {
        DfoError::Objective { source, .. } => source,
        other => SoupError::Optimizer(other.to_string()),
    })?;

    let lambda_star = MixingVector::new(result.best_point)?;
    let params = mix_components(psi, theta, spec, &lambda_star)?;
    Ok(MixingOutcome {
        lambda_star,
        params,
        acc: result.best_value,
        evaluations: result.evaluations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldConfig {
    pub tau: f64,
    pub budget: usize,
    pub seed: u64,
    pub solver: Solver,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            budget: dfo::DEFAULT_BUDGET,
            seed: 0,
            solver: Solver::Cobyla,
        }
    }
}

/// The manifold mixing model soup.
pub fn manifold_mix_soup<E: Evaluator>(
    pool: ModelPool,
    spec: &PartitionSpec,
    eval: &E,
    config: &ManifoldConfig,
) -> Result<(ParameterSet, SoupReport), SoupFailure> {
    check_gate_args(1, config.tau)?;
    if config.budget == 0 {
        return Err(SoupError::InvalidArgument("budget must be at least 1".into()).into());
    }
    spec.validate_for(&pool.members()[0].params)
        .map_err(SoupError::from)?;

    let (pool, sort_calls) = sort_pool(pool, eval)?;
    let members = pool.members();
    let mut report = SoupReport::new(Method::Manifold, pool.ids());
    report.tau = Some(config.tau);
    report.budget = Some(config.budget);
    report.seed = Some(config.seed);
    report.solver = Some(config.solver);
    report.components = Some(spec.m);
    report.dataset = Some(eval.dataset_id().to_string());
    report.evaluations.sorting = sort_calls;

    let mut psi = members[0].params.clone();
    let mut psi_acc = members[0].val_acc.expect("sorted pool has accuracies");
    let mut k = 1usize;

    for (i, theta) in members.iter().enumerate().skip(1) {
        let gate = match approx_average_gate_cached(&psi, psi_acc, &theta.params, k, eval, config.tau)
        {
            Ok(g) => g,
            Err(e) => return Err(report.fail(e)),
        };
        report.evaluations.gates += 1;
        let mut record = CandidateRecord {
            id: theta.id.clone(),
            gate_acc: Some(gate.gate_acc),
            gate_pass: Some(gate.pass),
            lambda_star: None,
            acc_before: Some(psi_acc),
            acc_after: None,
            accepted: false,
            optimizer_evals: 0,
        };
        if gate.pass {
            let mixing = MixingConfig {
                budget: config.budget,
                seed: derive_seed(config.seed, "manifold-candidate", i as u64),
                solver: config.solver,
            };
            let outcome = match optimize_mixing(&psi, &theta.params, spec, k, eval, &mixing) {
                Ok(o) => o,
                Err(e) => {
                    report.candidates.push(record);
                    return Err(report.fail(e));
                }
            };
            report.evaluations.optimizer += outcome.evaluations;
            record.optimizer_evals = outcome.evaluations;
            record.lambda_star = Some(outcome.lambda_star.values().to_vec());
            record.acc_after = Some(outcome.acc);
            // the optimizer's reported value is ValAcc(Ψ'*); no re-evaluation
            if outcome.acc > psi_acc {
                record.accepted = true;
                psi = outcome.params;
                psi_acc = outcome.acc;
                k += 1;
                report.final_state.ingredients.push(theta.id.clone());
            }
        }
        report.candidates.push(record);
    }

    report.final_state.k = k;
    report.final_state.val_acc = Some(psi_acc);
    report.evaluations.reconcile();
    Ok((psi, report))
}
