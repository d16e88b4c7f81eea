//! Round orchestration: broadcast, per-client fairness and private stages,
//! server aggregation.

use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchIter, ClientDataset, Dataset};
use crate::dp::{clip_gradient, gaussian_perturb, ledger_advance, PrivacyConfig, PrivacyLedger};
use crate::error::{Error, Result};
use crate::fairness::fairness_report;
use crate::model::{init_model, CrossEntropy, Gradient, ModelParams};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::trainer::{run_fair_steps, FairTrainState, FairnessConfig, Lagrangian, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// `global += mean(local - global)`.
    #[default]
    AverageDeltas,
    /// `global = mean(local)`.
    AverageParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    /// Epochs of Fair-SGD per round.
    pub fair_epochs: usize,
    /// Epochs of clipped, noised SGD per round after the fairness stage.
    pub private_epochs: usize,
    pub aggregation: AggregationMode,
    /// Weight client contributions by training-shard size.
    pub weighted: bool,
    /// Share of each shard held out for evaluation.
    pub test_fraction: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            clients_per_round: 5,
            rounds: 50,
            fair_epochs: 1,
            private_epochs: 1,
            aggregation: AggregationMode::AverageDeltas,
            weighted: false,
            test_fraction: 0.2,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("federation.clients", "must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return Err(Error::config(
                "federation.clients_per_round",
                format!("must lie in 1..={}, got {}", self.clients, self.clients_per_round),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("federation.rounds", "must be at least 1"));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("federation.test_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything one federated run needs besides data and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub federation: FederationConfig,
    pub fairness: FairnessConfig,
    pub privacy: PrivacyConfig,
    /// Hidden layer widths; input width comes from the data, output is 1.
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
}

impl RunConfig {
    pub fn dims(&self, n_features: usize) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(n_features);
        d.extend_from_slice(&self.hidden);
        d.push(1);
        d
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.fairness.validate()?;
        if self.privacy.enabled {
            self.privacy.validate()?;
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "need at least one hidden layer, all widths >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// A client's training and evaluation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit<T> {
    pub client: usize,
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> ClientSplit<T> {
    pub fn from_shard(shard: &ClientDataset<T>, test_fraction: f64, seed: u64) -> Self {
        let (train, test) = crate::data::train_test_split(shard, test_fraction, seed);
        Self {
            client: shard.client,
            train: train.data,
            test: test.data,
        }
    }
}

/// Per-(round, client) evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub client: usize,
    pub acc_overall: f64,
    pub acc_group: Vec<f64>,
    pub demp_error: f64,
    pub eo_error: f64,
    pub di_error: f64,
    /// Mean cross-entropy over the round's local steps.
    pub train_loss: f64,
    /// Client's cumulative privacy spend after this round.
    pub epsilon_spent: f64,
    pub delta_spent: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[RoundMetrics], n_groups: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["round".to_owned(), "client".to_owned(), "acc_overall".to_owned()];
    header.extend((0..n_groups).map(|g| format!("acc_group_{g}")));
    header.extend(["demp_error", "eo_error", "di_error"].map(str::to_owned));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.round.to_string(), r.client.to_string(), r.acc_overall.to_string()];
        rec.extend((0..n_groups).map(|g| r.acc_group.get(g).copied().unwrap_or(f64::NAN).to_string()));
        rec.extend([r.demp_error, r.eo_error, r.di_error].map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("metrics", e))
}

/// Copies of `global` for the selected clients.
pub fn broadcast<T: Scalar>(global: &ModelParams<T>, selected: &[usize]) -> Vec<(usize, ModelParams<T>)> {
    selected.iter().map(|&c| (c, global.clone())).collect()
}

/// Result of one client's round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome<T> {
    pub client: usize,
    pub params: ModelParams<T>,
    pub metrics: RoundMetrics,
    pub trace: Vec<StepRecord>,
    pub private_steps: u64,
    pub train_rows: usize,
}

/// Batch size actually used on `n` rows.
pub fn effective_batch(batch: usize, n: usize) -> usize {
    batch.min(n).max(1)
}

/// Fairness stage then private stage, starting from `start`, evaluated on
/// the client's test rows.
pub fn client_round<T: Scalar>(
    split: &ClientSplit<T>,
    start: ModelParams<T>,
    cfg: &RunConfig,
    round: usize,
    seed: u64,
) -> Result<ClientOutcome<T>> {
    let data = &split.train;
    if data.is_empty() {
        return Err(Error::Empty(format!("client {} has no training rows", split.client)));
    }
    let client = split.client as u32;
    let round_id = round as u32;
    let batch = effective_batch(cfg.batch_size, data.len());
    let lr = T::lit(cfg.lr);

    let mut state = FairTrainState::new(start, &cfg.fairness, data.n_groups);
    let mut fair_batches = BatchIter::new(data.len(), batch, rng::stream(seed, Purpose::FairBatches, client, round_id))?;
    let fair_steps = cfg.federation.fair_epochs * fair_batches.batches_per_epoch();
    let trace = run_fair_steps(&mut state, data, &cfg.fairness, lr, fair_steps, &mut fair_batches)?;
    let mut losses: Vec<f64> = trace.iter().map(|r| r.base_loss).collect();

    let FairTrainState { mut params, lambda, .. } = state;
    let mut private_batches =
        BatchIter::new(data.len(), batch, rng::stream(seed, Purpose::PrivateBatches, client, round_id))?;
    let private_steps = cfg.federation.private_epochs * private_batches.batches_per_epoch();
    let mut noise = rng::stream(seed, Purpose::Noise, client, round_id);
    let sigma = if cfg.privacy.enabled { cfg.privacy.sigma()? } else { 0.0 };
    let clip = T::lit(cfg.privacy.clip);
    for _ in 0..private_steps {
        let b = data.select(&private_batches.next().expect("endless"));
        // multipliers stay frozen at the fairness stage's final values
        let lagr = Lagrangian::new(&b.labels, &b.groups, b.n_groups, &lambda, &cfg.fairness);
        let ce = CrossEntropy { labels: &b.labels };
        let (loss, g) = if cfg.privacy.enabled {
            let (loss, per_example) = if cfg.fairness.any_enabled() {
                params.per_example_gradients(&b.features, &lagr)?
            } else {
                params.per_example_gradients(&b.features, &ce)?
            };
            let mut sum = Gradient::zeros(params.layout());
            for g in &per_example {
                sum.add_assign(&clip_gradient(g, clip))?;
            }
            (loss, gaussian_perturb(&sum, sigma, cfg.privacy.clip, b.len(), &mut noise)?)
        } else if cfg.fairness.any_enabled() {
            params.backward(&b.features, &lagr)?
        } else {
            params.backward(&b.features, &ce)?
        };
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("private-stage gradient, client {}", split.client)));
        }
        params.apply_update_in_place(&g, lr)?;
        losses.push(match lagr.take_last() {
            Some(v) => v.base.as_f64(),
            None => loss.as_f64(),
        });
    }

    let metrics = evaluate(&params, &split.test, round, split.client, mean(&losses))?;
    Ok(ClientOutcome {
        client: split.client,
        params,
        metrics,
        trace,
        private_steps: if cfg.privacy.enabled { private_steps as u64 } else { 0 },
        train_rows: data.len(),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Hard-decision metrics of `params` on `test`; NaN fields when `test` is empty.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    test: &Dataset<T>,
    round: usize,
    client: usize,
    train_loss: f64,
) -> Result<RoundMetrics> {
    if test.is_empty() {
        return Ok(RoundMetrics {
            round,
            client,
            acc_overall: f64::NAN,
            acc_group: vec![f64::NAN; test.n_groups],
            demp_error: f64::NAN,
            eo_error: f64::NAN,
            di_error: f64::NAN,
            train_loss,
            epsilon_spent: 0.0,
            delta_spent: 0.0,
        });
    }
    let p = params.forward(&test.features)?;
    let r = fairness_report(&p, &test.groups, &test.labels, test.n_groups, T::lit(0.5))?;
    Ok(RoundMetrics {
        round,
        client,
        acc_overall: r.accuracy,
        acc_group: r.group_accuracy,
        demp_error: r.demp_error,
        eo_error: r.eo_error,
        di_error: r.di_error,
        train_loss,
        epsilon_spent: 0.0,
        delta_spent: 0.0,
    })
}

/// Mean of flat vectors, accumulated as offsets from the first so identical
/// inputs reproduce it exactly. Optional nonnegative weights.
pub fn mean_flat<T: Scalar>(vectors: &[&[T]], weights: Option<&[f64]>) -> Result<Vec<T>> {
    let first = *vectors
        .first()
        .ok_or_else(|| Error::Empty("no contributions to aggregate".into()))?;
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::Shape("contributions differ in length".into()));
    }
    let w: Vec<T> = match weights {
        Some(w) if w.len() == vectors.len() => {
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::InvalidArgument("aggregation weights sum to zero".into()));
            }
            w.iter().map(|&x| T::lit(x / total)).collect()
        }
        Some(_) => return Err(Error::Shape("one weight per contribution required".into())),
        None => vec![T::one() / T::from_count(vectors.len()); vectors.len()],
    };
    let mut out = first.to_vec();
    for (k, o) in out.iter_mut().enumerate() {
        let base = first[k];
        let mut acc = T::zero();
        for (v, &wi) in vectors.iter().zip(&w).skip(1) {
            acc += wi * (v[k] - base);
        }
        *o = base + acc;
    }
    Ok(out)
}

/// New global model from the clients' local models.
pub fn aggregate<T: Scalar>(
    global: &ModelParams<T>,
    locals: &[&ModelParams<T>],
    weights: Option<&[f64]>,
    mode: AggregationMode,
) -> Result<ModelParams<T>> {
    if locals.is_empty() {
        return Err(Error::Empty("no contributions to aggregate".into()));
    }
    match mode {
        AggregationMode::AverageParams => {
            let views: Vec<&[T]> = locals.iter().map(|m| m.values()).collect();
            for m in locals {
                m.delta_from(global)?;
            }
            ModelParams::from_values(global.layout(), mean_flat(&views, weights)?)
        }
        AggregationMode::AverageDeltas => {
            let deltas: Vec<Gradient<T>> = locals.iter().map(|m| m.delta_from(global)).collect::<Result<_>>()?;
            let views: Vec<&[T]> = deltas.iter().map(|d| d.values()).collect();
            let mean = mean_flat(&views, weights)?;
            let values = global.values().iter().zip(&mean).map(|(&g, &d)| g + d).collect();
            ModelParams::from_values(global.layout(), values)
        }
    }
}

/// Clients taking part in `round` (sorted).
pub fn select_clients(n: usize, m: usize, round: usize, seed: u64) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut picked = index::sample(&mut rng::stream(seed, Purpose::Selection, 0, round as u32), n, m).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundPrivacy {
    pub round: usize,
    /// Largest per-client step count so far.
    pub steps: u64,
    pub epsilon_total: f64,
    pub delta_total: f64,
    pub mean_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundFailure {
    pub round: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult<T> {
    pub global: ModelParams<T>,
    /// Global model after each completed round.
    pub history: Vec<ModelParams<T>>,
    pub metrics: Vec<RoundMetrics>,
    pub ledgers: Vec<PrivacyLedger>,
    pub round_privacy: Vec<RoundPrivacy>,
    /// Fair-SGD trace per client, concatenated over rounds.
    pub traces: Vec<Vec<StepRecord>>,
    /// `(round, client, message)` of clients dropped from an aggregate.
    pub dropped: Vec<(usize, usize, String)>,
    pub failure: Option<RoundFailure>,
}

impl<T> RunResult<T> {
    pub fn completed_rounds(&self) -> usize {
        self.history.len()
    }
}

/// Federated training over `clients` (indexed by position). Rounds are
/// 1-based. A round in which every selected client fails stops the run and
/// is recorded in `failure`.
pub fn run_training<T: Scalar>(clients: &[ClientSplit<T>], cfg: &RunConfig, seed: u64) -> Result<RunResult<T>> {
    cfg.validate()?;
    if clients.len() != cfg.federation.clients {
        return Err(Error::config(
            "federation.clients",
            format!("{} configured, {} client splits given", cfg.federation.clients, clients.len()),
        ));
    }
    let n_features = clients[0].train.n_features();
    let mut global = init_model(&cfg.dims(n_features), seed)?;
    let base_ledger = if cfg.privacy.enabled {
        PrivacyLedger::from_config(&cfg.privacy)?
    } else {
        PrivacyLedger::new(0.0, 0.0)
    };
    let mut result = RunResult {
        global: global.clone(),
        history: Vec::with_capacity(cfg.federation.rounds),
        metrics: Vec::new(),
        ledgers: vec![base_ledger; clients.len()],
        round_privacy: Vec::new(),
        traces: vec![Vec::new(); clients.len()],
        dropped: Vec::new(),
        failure: None,
    };

    for round in 1..=cfg.federation.rounds {
        let selected = select_clients(clients.len(), cfg.federation.clients_per_round, round, seed);
        let starts = broadcast(&global, &selected);
        let outcomes: Vec<(usize, Result<ClientOutcome<T>>)> = starts
            .into_par_iter()
            .map(|(c, start)| (c, client_round(&clients[c], start, cfg, round, seed)))
            .collect();

        let mut ok = Vec::with_capacity(outcomes.len());
        for (c, out) in outcomes {
            match out {
                Ok(o) => ok.push(o),
                Err(e) => {
                    log::warn!("round {round}: client {c} dropped: {e}");
                    result.dropped.push((round, c, e.to_string()));
                }
            }
        }
        if ok.is_empty() {
            result.failure = Some(RoundFailure {
                round,
                message: "every selected client failed".into(),
            });
            break;
        }

        let locals: Vec<&ModelParams<T>> = ok.iter().map(|o| &o.params).collect();
        let weights: Option<Vec<f64>> = cfg
            .federation
            .weighted
            .then(|| ok.iter().map(|o| o.train_rows as f64).collect());
        global = match aggregate(&global, &locals, weights.as_deref(), cfg.federation.aggregation) {
            Ok(g) => g,
            Err(e) => {
                result.failure = Some(RoundFailure {
                    round,
                    message: e.to_string(),
                });
                break;
            }
        };

        let mut losses = Vec::with_capacity(ok.len());
        for mut o in ok {
            let ledger = &mut result.ledgers[o.client];
            *ledger = ledger_advance(ledger, o.private_steps);
            o.metrics.epsilon_spent = ledger.epsilon_total();
            o.metrics.delta_spent = ledger.delta_total();
            losses.push(o.metrics.train_loss);
            result.traces[o.client].extend(o.trace);
            result.metrics.push(o.metrics);
        }
        let worst = result
            .ledgers
            .iter()
            .copied()
            .max_by_key(|l| l.steps)
            .expect("at least one client");
        result.round_privacy.push(RoundPrivacy {
            round,
            steps: worst.steps,
            epsilon_total: worst.epsilon_total(),
            delta_total: worst.delta_total(),
            mean_train_loss: mean(&losses),
        });
        result.history.push(global.clone());
    }
    result.global = global;
    Ok(result)
}

/// Plain FedAvg over the same batch order as [`run_training`] with fairness
/// and privacy off: each selected client runs `fair_epochs + private_epochs`
/// epochs of cross-entropy SGD from the global model, then the server takes
/// the unweighted parameter mean. Returns the global model after each round.
pub fn fedavg_reference<T: Scalar>(clients: &[ClientSplit<T>], cfg: &RunConfig, seed: u64) -> Result<Vec<ModelParams<T>>> {
    let n_features = clients[0].train.n_features();
    let mut global: ModelParams<T> = init_model(&cfg.dims(n_features), seed)?;
    let lr = T::lit(cfg.lr);
    let mut history = Vec::new();
    for round in 1..=cfg.federation.rounds {
        let selected = select_clients(clients.len(), cfg.federation.clients_per_round, round, seed);
        let mut locals = Vec::new();
        for &c in &selected {
            let data = &clients[c].train;
            let batch = effective_batch(cfg.batch_size, data.len());
            let mut params = global.clone();
            let streams = [
                (Purpose::FairBatches, cfg.federation.fair_epochs),
                (Purpose::PrivateBatches, cfg.federation.private_epochs),
            ];
            for (purpose, epochs) in streams {
                let mut it = BatchIter::new(data.len(), batch, rng::stream(seed, purpose, c as u32, round as u32))?;
                for _ in 0..epochs * it.batches_per_epoch() {
                    let b = data.select(&it.next().expect("endless"));
                    let (_, g) = params.backward(&b.features, &CrossEntropy { labels: &b.labels })?;
                    params.apply_update_in_place(&g, lr)?;
                }
            }
            locals.push(params);
        }
        let k = T::from_count(locals.len());
        let mut values = vec![T::zero(); global.len()];
        for m in &locals {
            values.iter_mut().zip(m.values()).for_each(|(a, &b)| *a += b);
        }
        values.iter_mut().for_each(|v| *v = *v / k);
        global = ModelParams::from_values(global.layout(), values)?;
        history.push(global.clone());
    }
    Ok(history)
}
