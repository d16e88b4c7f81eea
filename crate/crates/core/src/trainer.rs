//! Fairness-constrained local training by simultaneous primal descent and
//! projected dual ascent on the Lagrangian
//! `L(θ, λ) = CE(θ) + Σ_k λ_k · max(0, loss_k(θ) - μ_k)`.

use std::cell::RefCell;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{BatchIter, ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::fairness::{soft_terms, Aggregation, SoftTerm};
use crate::model::{cross_entropy, init_model, CrossEntropy, LogitLoss, ModelParams};
use crate::rng::{self, Purpose, StreamRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierMode {
    /// One multiplier per constraint on the aggregated loss.
    #[default]
    PerConstraint,
    /// One multiplier per group (DemP) and per group-label cell (EO).
    PerCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConfig {
    pub demp: bool,
    pub eo: bool,
    pub di: bool,
    pub mu_demp: f64,
    pub mu_eo: f64,
    pub mu_di: f64,
    /// Upper end of the multiplier box; also each multiplier's starting value.
    pub lambda_max: f64,
    pub dual_lr: f64,
    pub aggregation: Aggregation,
    pub multipliers: MultiplierMode,
    /// Floor for disparate-impact ratio denominators.
    pub di_guard: f64,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            demp: true,
            eo: true,
            di: true,
            mu_demp: 0.0,
            mu_eo: 0.0,
            mu_di: 0.0,
            lambda_max: 10.0,
            dual_lr: 0.05,
            aggregation: Aggregation::MaxAbs,
            multipliers: MultiplierMode::PerConstraint,
            di_guard: crate::fairness::DEFAULT_DI_GUARD,
        }
    }
}

impl FairnessConfig {
    /// All constraints off: training reduces to plain cross-entropy SGD.
    pub fn unconstrained() -> Self {
        Self {
            demp: false,
            eo: false,
            di: false,
            ..Self::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.demp || self.eo || self.di
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu_demp", self.mu_demp), ("mu_eo", self.mu_eo), ("mu_di", self.mu_di)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("fairness.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::config("fairness.lambda_max", format!("must be finite and > 0, got {}", self.lambda_max)));
        }
        if !(self.dual_lr >= 0.0 && self.dual_lr.is_finite()) {
            return Err(Error::config("fairness.dual_lr", format!("must be finite and >= 0, got {}", self.dual_lr)));
        }
        if !(self.di_guard > 0.0) {
            return Err(Error::config("fairness.di_guard", "must be > 0"));
        }
        Ok(())
    }
}

/// Dual variables, one vector per constraint. A disabled constraint has an
/// empty vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeMultipliers<T> {
    pub demp: Vec<T>,
    pub eo: Vec<T>,
    pub di: Vec<T>,
}

impl<T: Scalar> LagrangeMultipliers<T> {
    /// Every multiplier at `value`, sized for `cfg` and `n_groups`.
    pub fn filled(cfg: &FairnessConfig, n_groups: usize, value: T) -> Self {
        let cells = |enabled: bool, per_cell: usize| {
            if !enabled {
                0
            } else if cfg.multipliers == MultiplierMode::PerCell {
                per_cell
            } else {
                1
            }
        };
        Self {
            demp: vec![value; cells(cfg.demp, n_groups)],
            eo: vec![value; cells(cfg.eo, 2 * n_groups)],
            di: vec![value; usize::from(cfg.di && n_groups >= 2)],
        }
    }

    pub fn at_max(cfg: &FairnessConfig, n_groups: usize) -> Self {
        Self::filled(cfg, n_groups, T::lit(cfg.lambda_max))
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.demp.iter().chain(&self.eo).chain(&self.di)
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.demp.iter_mut().chain(self.eo.iter_mut()).chain(self.di.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.demp.len() + self.eo.len() + self.di.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn within(&self, lambda_max: T) -> bool {
        self.iter().all(|&l| l >= T::zero() && l <= lambda_max)
    }
}

/// Elementwise clamp to `[0, lambda_max]`.
pub fn project_lambda<T: Scalar>(lambda: &LagrangeMultipliers<T>, lambda_max: T) -> LagrangeMultipliers<T> {
    let mut out = lambda.clone();
    out.iter_mut().for_each(|l| *l = l.max(T::zero()).min(lambda_max));
    out
}

/// Nonnegative penalties aligned with [`LagrangeMultipliers`], each with its
/// gradient in the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties<T> {
    pub demp: Vec<SoftTerm<T>>,
    pub eo: Vec<SoftTerm<T>>,
    pub di: Vec<SoftTerm<T>>,
}

impl<T: Scalar> Penalties<T> {
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.demp.iter().chain(&self.eo).chain(&self.di).map(|t| t.value)
    }

    fn max_of(terms: &[SoftTerm<T>]) -> T {
        terms.iter().fold(T::zero(), |m, t| m.max(t.value))
    }

    pub fn summary(&self) -> [T; 3] {
        [Self::max_of(&self.demp), Self::max_of(&self.eo), Self::max_of(&self.di)]
    }
}

fn zero_term<T: Scalar>(n: usize) -> SoftTerm<T> {
    SoftTerm {
        value: T::zero(),
        grad: vec![T::zero(); n],
    }
}

/// `max(0, |term| - mu)` with its gradient.
fn hinge_abs<T: Scalar>(term: &SoftTerm<T>, mu: T) -> SoftTerm<T> {
    let a = term.value.abs();
    if a > mu {
        let s = term.value.signum();
        SoftTerm {
            value: a - mu,
            grad: term.grad.iter().map(|&g| s * g).collect(),
        }
    } else {
        zero_term(term.grad.len())
    }
}

/// Aggregated `max(0, agg|terms| - mu)`; absent terms are skipped.
fn hinge_aggregate<T: Scalar>(terms: &[Option<SoftTerm<T>>], mode: Aggregation, mu: T, n: usize) -> SoftTerm<T> {
    let present: Vec<&SoftTerm<T>> = terms.iter().flatten().collect();
    if present.is_empty() {
        return zero_term(n);
    }
    let agg = match mode {
        Aggregation::MaxAbs => {
            let best = present
                .iter()
                .copied()
                .reduce(|b, t| if t.value.abs() > b.value.abs() { t } else { b })
                .expect("nonempty");
            let s = best.value.signum();
            SoftTerm {
                value: best.value.abs(),
                grad: best.grad.iter().map(|&g| s * g).collect(),
            }
        }
        Aggregation::MeanAbs => {
            let k = T::from_count(present.len());
            let mut grad = vec![T::zero(); n];
            let mut value = T::zero();
            for t in &present {
                let s = t.value.signum();
                value += t.value.abs();
                grad.iter_mut().zip(&t.grad).for_each(|(g, &d)| *g += s * d / k);
            }
            SoftTerm { value: value / k, grad }
        }
    };
    if agg.value > mu {
        SoftTerm {
            value: agg.value - mu,
            grad: agg.grad,
        }
    } else {
        zero_term(n)
    }
}

/// Penalties of one batch of soft predictions.
pub fn penalties<T: Scalar>(
    p: &[T],
    groups: &[usize],
    labels: &[u8],
    n_groups: usize,
    cfg: &FairnessConfig,
) -> Result<Penalties<T>> {
    let n = p.len();
    let mut out = Penalties {
        demp: Vec::new(),
        eo: Vec::new(),
        di: Vec::new(),
    };
    if !cfg.any_enabled() {
        return Ok(out);
    }
    let terms = soft_terms(p, groups, labels, n_groups, T::lit(cfg.di_guard))?;
    let per_cell = cfg.multipliers == MultiplierMode::PerCell;
    let cellwise = |ts: &[Option<SoftTerm<T>>], mu: f64| -> Vec<SoftTerm<T>> {
        ts.iter()
            .map(|t| t.as_ref().map_or_else(|| zero_term(n), |t| hinge_abs(t, T::lit(mu))))
            .collect()
    };
    if cfg.demp {
        out.demp = if per_cell {
            cellwise(&terms.demp, cfg.mu_demp)
        } else {
            vec![hinge_aggregate(&terms.demp, cfg.aggregation, T::lit(cfg.mu_demp), n)]
        };
    }
    if cfg.eo {
        out.eo = if per_cell {
            cellwise(&terms.eo, cfg.mu_eo)
        } else {
            vec![hinge_aggregate(&terms.eo, cfg.aggregation, T::lit(cfg.mu_eo), n)]
        };
    }
    if cfg.di && n_groups >= 2 {
        out.di = vec![match &terms.di {
            Some(t) if t.value > T::lit(cfg.mu_di) => SoftTerm {
                value: t.value - T::lit(cfg.mu_di),
                grad: t.grad.clone(),
            },
            _ => zero_term(n),
        }];
    }
    Ok(out)
}

/// Evaluated Lagrangian of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianValue<T> {
    pub base: T,
    pub total: T,
    pub penalties: Penalties<T>,
}

/// The batch Lagrangian as a [`LogitLoss`]. The last evaluation is recorded so
/// the dual step can reuse its penalties.
pub struct Lagrangian<'a, T> {
    pub labels: &'a [u8],
    pub groups: &'a [usize],
    pub n_groups: usize,
    pub lambda: &'a LagrangeMultipliers<T>,
    pub cfg: &'a FairnessConfig,
    last: RefCell<Option<LagrangianValue<T>>>,
}

impl<'a, T: Scalar> Lagrangian<'a, T> {
    pub fn new(
        labels: &'a [u8],
        groups: &'a [usize],
        n_groups: usize,
        lambda: &'a LagrangeMultipliers<T>,
        cfg: &'a FairnessConfig,
    ) -> Self {
        Self {
            labels,
            groups,
            n_groups,
            lambda,
            cfg,
            last: RefCell::new(None),
        }
    }

    pub fn take_last(&self) -> Option<LagrangianValue<T>> {
        self.last.borrow_mut().take()
    }
}

impl<T: Scalar> LogitLoss<T> for Lagrangian<'_, T> {
    fn evaluate(&self, logits: &[T], probs: &[T]) -> Result<(T, Vec<T>)> {
        let (base, mut dz) = cross_entropy(logits, probs, self.labels);
        let pens = penalties(probs, self.groups, self.labels, self.n_groups, self.cfg)?;
        let mut total = base;
        if self.cfg.any_enabled() {
            let pairs = [
                (&pens.demp, &self.lambda.demp),
                (&pens.eo, &self.lambda.eo),
                (&pens.di, &self.lambda.di),
            ];
            let mut dp = vec![T::zero(); probs.len()];
            for (terms, lambdas) in pairs {
                if terms.len() != lambdas.len() {
                    return Err(Error::Shape(format!(
                        "{} multipliers for {} penalty terms",
                        lambdas.len(),
                        terms.len()
                    )));
                }
                for (t, &l) in terms.iter().zip(lambdas) {
                    if !t.value.is_finite() {
                        return Err(Error::NonFinite(format!("penalty {}", t.value)));
                    }
                    total += l * t.value;
                    dp.iter_mut().zip(&t.grad).for_each(|(d, &g)| *d += l * g);
                }
            }
            for ((z, &d), &p) in dz.iter_mut().zip(&dp).zip(probs) {
                *z += d * p * (T::one() - p);
            }
        }
        *self.last.borrow_mut() = Some(LagrangianValue {
            base,
            total,
            penalties: pens,
        });
        Ok((total, dz))
    }
}

/// Lagrangian value of `model` on rows `x` at multipliers `lambda`.
pub fn lagrangian_loss<T: Scalar>(
    model: &ModelParams<T>,
    data: &Dataset<T>,
    lambda: &LagrangeMultipliers<T>,
    cfg: &FairnessConfig,
) -> Result<LagrangianValue<T>> {
    let logits = model.logits(&data.features)?;
    let probs: Vec<T> = logits.iter().copied().map(crate::scalar::logistic).collect();
    lagrangian_from_predictions(&logits, &probs, &data.labels, &data.groups, data.n_groups, lambda, cfg)
}

pub fn lagrangian_from_predictions<T: Scalar>(
    logits: &[T],
    probs: &[T],
    labels: &[u8],
    groups: &[usize],
    n_groups: usize,
    lambda: &LagrangeMultipliers<T>,
    cfg: &FairnessConfig,
) -> Result<LagrangianValue<T>> {
    let l = Lagrangian::new(labels, groups, n_groups, lambda, cfg);
    l.evaluate(logits, probs)?;
    Ok(l.take_last().expect("recorded"))
}

/// One step's trace record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub base_loss: f64,
    pub penalty_demp: f64,
    pub penalty_eo: f64,
    pub penalty_di: f64,
    pub lambda_demp: f64,
    pub lambda_eo: f64,
    pub lambda_di: f64,
}

impl StepRecord {
    pub const HEADER: [&'static str; 8] = [
        "step",
        "base_loss",
        "penalty_demp",
        "penalty_eo",
        "penalty_di",
        "lambda_demp",
        "lambda_eo",
        "lambda_di",
    ];
}

pub fn write_trace_csv<W: Write>(trace: &[StepRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(StepRecord::HEADER)?;
    for r in trace {
        out.write_record([
            r.step.to_string(),
            r.base_loss.to_string(),
            r.penalty_demp.to_string(),
            r.penalty_eo.to_string(),
            r.penalty_di.to_string(),
            r.lambda_demp.to_string(),
            r.lambda_eo.to_string(),
            r.lambda_di.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("trace", e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairTrainState<T> {
    pub params: ModelParams<T>,
    pub lambda: LagrangeMultipliers<T>,
    pub step: usize,
}

impl<T: Scalar> FairTrainState<T> {
    /// Multipliers start at `lambda_max`.
    pub fn new(params: ModelParams<T>, cfg: &FairnessConfig, n_groups: usize) -> Self {
        Self {
            params,
            lambda: LagrangeMultipliers::at_max(cfg, n_groups),
            step: 0,
        }
    }
}

/// One simultaneous primal-dual step. Both gradients are taken at the
/// pre-step `(θ, λ)`; the state is left untouched on error.
pub fn fair_sgd_step<T: Scalar>(
    state: &mut FairTrainState<T>,
    batch: &Dataset<T>,
    cfg: &FairnessConfig,
    lr: T,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Empty("fair step needs a nonempty batch".into()));
    }
    let (base, grad, pens) = if cfg.any_enabled() {
        let loss = Lagrangian::new(&batch.labels, &batch.groups, batch.n_groups, &state.lambda, cfg);
        let (_, grad) = state.params.backward(&batch.features, &loss).map_err(|e| at_step(e, state.step))?;
        let v = loss.take_last().expect("recorded");
        (v.base, grad, Some(v.penalties))
    } else {
        let (base, grad) = state
            .params
            .backward(&batch.features, &CrossEntropy { labels: &batch.labels })
            .map_err(|e| at_step(e, state.step))?;
        (base, grad, None)
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
    }
    state.params.apply_update_in_place(&grad, lr)?;
    let lambda_max = T::lit(cfg.lambda_max);
    let dual_lr = T::lit(cfg.dual_lr);
    let mut summary = [0.0; 3];
    if let Some(p) = &pens {
        let pairs = [
            (&mut state.lambda.demp, &p.demp),
            (&mut state.lambda.eo, &p.eo),
            (&mut state.lambda.di, &p.di),
        ];
        for (lambdas, terms) in pairs {
            for (l, t) in lambdas.iter_mut().zip(terms) {
                *l = (*l + dual_lr * t.value).max(T::zero()).min(lambda_max);
            }
        }
        summary = p.summary().map(Scalar::as_f64);
    }
    let lmax = |v: &[T]| v.iter().fold(0.0f64, |m, l| m.max(l.as_f64()));
    let record = StepRecord {
        step: state.step,
        base_loss: base.as_f64(),
        penalty_demp: summary[0],
        penalty_eo: summary[1],
        penalty_di: summary[2],
        lambda_demp: lmax(&state.lambda.demp),
        lambda_eo: lmax(&state.lambda.eo),
        lambda_di: lmax(&state.lambda.di),
    };
    state.step += 1;
    Ok(record)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (step {step})")),
        other => other,
    }
}

/// Step size and batch size shared by the local training stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSchedule {
    pub lr: f64,
    pub batch_size: usize,
}

/// Runs `steps` Fair-SGD steps from `state`, drawing batches from `batches`.
pub fn run_fair_steps<T: Scalar>(
    state: &mut FairTrainState<T>,
    data: &Dataset<T>,
    cfg: &FairnessConfig,
    lr: T,
    steps: usize,
    batches: &mut BatchIter<StreamRng>,
) -> Result<Vec<StepRecord>> {
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = batches.next().expect("endless batch stream");
        let batch = data.select(&idx);
        trace.push(fair_sgd_step(state, &batch, cfg, lr)?);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairTrainOutput<T> {
    pub params: ModelParams<T>,
    pub lambda: LagrangeMultipliers<T>,
    pub trace: Vec<StepRecord>,
}

/// Fair-SGD for one client from a seeded initialization: `steps` steps with
/// multipliers starting at `lambda_max`.
pub fn train_fair<T: Scalar>(
    data: &ClientDataset<T>,
    dims: &[usize],
    cfg: &FairnessConfig,
    schedule: LocalSchedule,
    steps: usize,
    seed: u64,
) -> Result<FairTrainOutput<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("Fair-SGD needs at least one step".into()));
    }
    cfg.validate()?;
    let params = init_model(dims, seed)?;
    let mut state = FairTrainState::new(params, cfg, data.data.n_groups);
    let mut batches = BatchIter::new(
        data.len(),
        schedule.batch_size,
        rng::stream(seed, Purpose::FairBatches, data.client as u32, 0),
    )?;
    let trace = run_fair_steps(&mut state, &data.data, cfg, T::lit(schedule.lr), steps, &mut batches)?;
    Ok(FairTrainOutput {
        params: state.params,
        lambda: state.lambda,
        trace,
    })
}

/// Plain mini-batch cross-entropy SGD over the same batch stream as
/// [`train_fair`]; the unconstrained reference.
pub fn train_plain_sgd<T: Scalar>(
    data: &ClientDataset<T>,
    dims: &[usize],
    schedule: LocalSchedule,
    steps: usize,
    seed: u64,
) -> Result<ModelParams<T>> {
    let mut params: ModelParams<T> = init_model(dims, seed)?;
    let mut batches = BatchIter::new(
        data.len(),
        schedule.batch_size,
        rng::stream(seed, Purpose::FairBatches, data.client as u32, 0),
    )?;
    let lr = T::lit(schedule.lr);
    for _ in 0..steps {
        let batch = data.data.select(&batches.next().expect("endless"));
        let (_, g) = params.backward(&batch.features, &CrossEntropy { labels: &batch.labels })?;
        params.apply_update_in_place(&g, lr)?;
    }
    Ok(params)
}

/// Probe sizes for [`estimate_duality_gap`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeBudget {
    /// Points of the uniform multiplier grid on `[0, lambda_max]`.
    pub lambda_grid: usize,
    /// Random Gaussian perturbations of the parameters.
    pub perturbations: usize,
    pub perturbation_scale: f64,
    /// Full-batch descent steps on `L(·, λ̂)`.
    pub descent_steps: usize,
    pub descent_lr: f64,
}

impl ProbeBudget {
    pub const NONE: ProbeBudget = ProbeBudget {
        lambda_grid: 0,
        perturbations: 0,
        perturbation_scale: 0.0,
        descent_steps: 0,
        descent_lr: 0.0,
    };
}

impl Default for ProbeBudget {
    fn default() -> Self {
        Self {
            lambda_grid: 11,
            perturbations: 8,
            perturbation_scale: 1e-2,
            descent_steps: 20,
            descent_lr: 0.05,
        }
    }
}

/// Empirical saddle-point gap at `(θ̂, λ̂)`:
/// `max_λ L(θ̂, λ) - min_θ L(θ, λ̂)` over probe sets that both contain the
/// current point, so the result is never negative. Diagnostic only; it makes
/// no claim about the true gap of a nonconvex model.
pub fn estimate_duality_gap<T: Scalar>(
    params: &ModelParams<T>,
    lambda: &LagrangeMultipliers<T>,
    data: &Dataset<T>,
    cfg: &FairnessConfig,
    budget: ProbeBudget,
    seed: u64,
) -> Result<T> {
    let at = |m: &ModelParams<T>, l: &LagrangeMultipliers<T>| -> Result<T> { Ok(lagrangian_loss(m, data, l, cfg)?.total) };
    let current = at(params, lambda)?;
    let mut upper = current;
    let lambda_max = cfg.lambda_max;
    for i in 0..budget.lambda_grid {
        let v = if budget.lambda_grid == 1 {
            lambda_max
        } else {
            lambda_max * i as f64 / (budget.lambda_grid - 1) as f64
        };
        let grid = LagrangeMultipliers::filled(cfg, data.n_groups, T::lit(v));
        upper = upper.max(at(params, &grid)?);
    }
    let mut lower = current;
    let mut rng = rng::global(seed, Purpose::Probe);
    for _ in 0..budget.perturbations {
        let mut probe = params.clone();
        for v in probe.values_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += T::lit(budget.perturbation_scale * z);
        }
        lower = lower.min(at(&probe, lambda)?);
    }
    let mut walker = params.clone();
    for _ in 0..budget.descent_steps {
        let loss = Lagrangian::new(&data.labels, &data.groups, data.n_groups, lambda, cfg);
        let (_, g) = walker.backward(&data.features, &loss)?;
        walker.apply_update_in_place(&g, T::lit(budget.descent_lr))?;
        lower = lower.min(at(&walker, lambda)?);
    }
    Ok((upper - lower).max(T::zero()))
}
