//! Run directories and reports.
//!
//! A run directory holds `metrics.csv`, `manifest.toml`, `model.ckpt` and, if
//! enabled, `trace_client_{i}.csv`. A paired run writes `privacy-on/` and
//! `privacy-off/` plus the report files of [`emit_report`].

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Precision};
use crate::data::{generate_synthetic, load_csv_dataset, partition_clients, DataSchema, Encoder, PartitionStrategy};
use crate::error::{Error, Result};
use crate::fed::{run_training, write_metrics_csv, ClientSplit, RoundFailure, RoundPrivacy};
use crate::model::save_checkpoint;
use crate::scalar::Scalar;
use crate::trainer::write_trace_csv;

pub const MANIFEST: &str = "manifest.toml";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const PLOT_DATA: &str = "plot_data.csv";
pub const FINAL_ACCURACY: &str = "final_accuracy.csv";
pub const COMPARISON: &str = "comparison.csv";
pub const PRIVACY_ON: &str = "privacy-on";
pub const PRIVACY_OFF: &str = "privacy-off";

/// Client splits plus what went into building them.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub clients: Vec<ClientSplit<T>>,
    pub schema: DataSchema,
    pub encoder: Encoder,
    pub summary: DataSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_rows: usize,
    pub test_rows: usize,
    pub dropped_missing: usize,
    pub dropped_other_group: usize,
    pub n_features: usize,
    pub group_names: Vec<String>,
    pub constant_columns: Vec<String>,
    pub client_train_rows: Vec<usize>,
    pub client_test_rows: Vec<usize>,
}

/// Loads or generates the data, fits the encoder on the training rows and
/// splits it across clients.
pub fn prepare_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<PreparedData<T>> {
    let schema = cfg.schema()?;
    let seed = cfg.training.seed;
    let n = cfg.federation.clients;
    let raw = match (&cfg.data.synthetic, &cfg.data.train) {
        (Some(s), _) => generate_synthetic(s)?,
        (None, Some(p)) => load_csv_dataset(p, &schema)?,
        (None, None) => return Err(Error::config("data.train", "a training file or data.synthetic is required")),
    };
    let encoder = Encoder::fit(&raw, &schema)?;
    let train = encoder.encode::<T>(&raw)?;
    let shards = partition_clients(&train, n, PartitionStrategy::Iid, seed)?;
    let mut dropped_missing = raw.dropped_missing;
    let mut dropped_other_group = raw.dropped_other_group;

    let clients: Vec<ClientSplit<T>> = match &cfg.data.test {
        Some(p) => {
            let raw_test = load_csv_dataset(p, &schema)?;
            dropped_missing += raw_test.dropped_missing;
            dropped_other_group += raw_test.dropped_other_group;
            let test = encoder.encode::<T>(&raw_test)?;
            let test_shards = partition_clients(&test, n, PartitionStrategy::Iid, seed)?;
            shards
                .into_iter()
                .zip(test_shards)
                .map(|(tr, te)| ClientSplit {
                    client: tr.client,
                    train: tr.data,
                    test: te.data,
                })
                .collect()
        }
        None => shards
            .iter()
            .map(|s| ClientSplit::from_shard(s, cfg.federation.test_fraction, seed))
            .collect(),
    };
    let mut group_names = schema.sensitive_groups.clone();
    group_names.resize_with(schema.n_groups(), || "other".to_owned());
    let summary = DataSummary {
        train_rows: clients.iter().map(|c| c.train.len()).sum(),
        test_rows: clients.iter().map(|c| c.test.len()).sum(),
        dropped_missing,
        dropped_other_group,
        n_features: encoder.n_features(),
        group_names,
        constant_columns: encoder.constant_columns(),
        client_train_rows: clients.iter().map(|c| c.train.len()).collect(),
        client_test_rows: clients.iter().map(|c| c.test.len()).collect(),
    };
    Ok(PreparedData {
        clients,
        schema,
        encoder,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<RoundFailureRecord>,
    pub completed_rounds: usize,
    pub dims: Vec<usize>,
    pub parameters: usize,
    /// Noise standard deviation relative to the clip bound; 0 without privacy.
    pub noise_multiplier: f64,
    pub epsilon_per_step: f64,
    pub data: DataSummary,
    pub dropped_clients: Vec<DroppedClient>,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundFailureRecord {
    pub round: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedClient {
    pub round: usize,
    pub client: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub private_steps: u64,
    pub epsilon_total: f64,
    pub delta_total: f64,
    pub mean_train_loss: f64,
}

impl From<&RoundPrivacy> for RoundRecord {
    fn from(r: &RoundPrivacy) -> Self {
        Self {
            round: r.round,
            private_steps: r.steps,
            epsilon_total: r.epsilon_total,
            delta_total: r.delta_total,
            mean_train_loss: r.mean_train_loss,
        }
    }
}

impl From<&RoundFailure> for RoundFailureRecord {
    fn from(f: &RoundFailure) -> Self {
        Self {
            round: f.round,
            message: f.message.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub run: RunSummary,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub overwrite: bool,
    pub paired_privacy: bool,
}

/// Directories written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub run_dirs: Vec<PathBuf>,
    pub report: Option<ReportSummary>,
}

/// Runs the configured experiment into `out`. In paired mode the same seed is
/// run with privacy on and off and a report compares them. A run that stops
/// early still writes its artifacts, then returns the round error.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<ExperimentOutput> {
    cfg.validate()?;
    cfg.check_files()?;
    if !opts.paired_privacy {
        prepare_dir(out, opts.overwrite)?;
        run_single(cfg, out)?;
        return Ok(ExperimentOutput {
            run_dirs: vec![out.to_path_buf()],
            report: None,
        });
    }
    let on_dir = out.join(PRIVACY_ON);
    let off_dir = out.join(PRIVACY_OFF);
    prepare_dir(&on_dir, opts.overwrite)?;
    prepare_dir(&off_dir, opts.overwrite)?;
    let mut on = cfg.clone();
    on.privacy.enabled = true;
    let mut off = cfg.clone();
    off.privacy.enabled = false;
    run_single(&on, &on_dir)?;
    run_single(&off, &off_dir)?;
    let report = emit_report(&[on_dir.clone(), off_dir.clone()], out)?;
    Ok(ExperimentOutput {
        run_dirs: vec![on_dir, off_dir],
        report: Some(report),
    })
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.join(MANIFEST).exists() {
        if !overwrite {
            return Err(Error::InvalidArgument(format!(
                "{} already holds a run; pass --overwrite to replace it",
                dir.display()
            )));
        }
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("trace_client_") && name.ends_with(".csv") {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_single(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    match cfg.model.precision {
        Precision::F32 => run_typed::<f32>(cfg, dir),
        Precision::F64 => run_typed::<f64>(cfg, dir),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let data = prepare_data::<T>(cfg)?;
    let run_cfg = cfg.run_config();
    log::info!(
        "{}: {} train / {} test rows, {} features, {} clients, privacy {}",
        dir.display(),
        data.summary.train_rows,
        data.summary.test_rows,
        data.summary.n_features,
        data.clients.len(),
        if cfg.privacy.enabled { "on" } else { "off" }
    );
    let result = run_training(&data.clients, &run_cfg, cfg.training.seed)?;
    let n_groups = data.schema.n_groups();

    write_metrics_csv(&result.metrics, n_groups, create(&dir.join(METRICS))?)?;
    save_checkpoint(&result.global, dir.join(CHECKPOINT))?;
    if cfg.output.traces {
        for (c, trace) in result.traces.iter().enumerate() {
            write_trace_csv(trace, create(&dir.join(format!("trace_client_{c}.csv")))?)?;
        }
    }
    let (noise_multiplier, epsilon_per_step) = if cfg.privacy.enabled {
        (cfg.privacy.sigma()?, cfg.privacy.epsilon_per_step()?)
    } else {
        (0.0, 0.0)
    };
    let manifest = Manifest {
        config: cfg.clone(),
        run: RunSummary {
            version: env!("CARGO_PKG_VERSION").to_owned(),
            status: if result.failure.is_some() { "failed" } else { "completed" }.to_owned(),
            failure: result.failure.as_ref().map(Into::into),
            completed_rounds: result.completed_rounds(),
            dims: result.global.layout().dims().to_vec(),
            parameters: result.global.len(),
            noise_multiplier,
            epsilon_per_step,
            data: data.summary.clone(),
            dropped_clients: result
                .dropped
                .iter()
                .map(|(round, client, message)| DroppedClient {
                    round: *round,
                    client: *client,
                    message: message.clone(),
                })
                .collect(),
            rounds: result.round_privacy.iter().map(Into::into).collect(),
        },
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    match result.failure {
        Some(f) => Err(Error::Round {
            round: f.round,
            message: f.message,
        }),
        None => Ok(()),
    }
}

/// One run's metrics table as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTable {
    pub variant: String,
    pub metric_names: Vec<String>,
    /// `(round, client, values)` in file order.
    pub rows: Vec<(usize, usize, Vec<f64>)>,
    pub manifest: Manifest,
}

impl RunTable {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir.join(MANIFEST))?;
        let path = dir.join(METRICS);
        let mut reader = csv::Reader::from_path(&path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header.len() < 3 || header[0] != "round" || header[1] != "client" {
            return Err(Error::Schema(format!("{}: unexpected header", path.display())));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = |m: String| Error::Row { row: i + 2, message: m };
            let round = rec[0].parse().map_err(|e| bad(format!("round: {e}")))?;
            let client = rec[1].parse().map_err(|e| bad(format!("client: {e}")))?;
            let values = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
                .collect::<Result<_>>()?;
            rows.push((round, client, values));
        }
        let variant = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            variant,
            metric_names: header[2..].to_vec(),
            rows,
            manifest,
        })
    }

    pub fn last_round(&self) -> usize {
        self.rows.iter().map(|r| r.0).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    /// Rounds kept from every run.
    pub rounds: usize,
    pub truncated: bool,
    pub plot_rows: usize,
}

/// Writes `plot_data.csv` (long format), `final_accuracy.csv` (per client and
/// group, with plain and shard-weighted means) and `comparison.csv` (final
/// round of every metric side by side across runs). Runs of different length
/// are cut to the shortest.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let mut tables = run_dirs.iter().map(|d| RunTable::load(d)).collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeMap::new();
    for t in &mut tables {
        let n = seen.entry(t.variant.clone()).or_insert(0usize);
        *n += 1;
        if *n > 1 {
            t.variant = format!("{}_{}", t.variant, n);
        }
    }
    let rounds = tables.iter().map(RunTable::last_round).min().unwrap_or(0);
    let truncated = tables.iter().any(|t| t.last_round() != rounds);
    if truncated {
        log::warn!("runs differ in length; reporting the first {rounds} rounds");
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut plot = csv::Writer::from_writer(create(&out.join(PLOT_DATA))?);
    plot.write_record(["round", "client", "metric", "value", "variant"])?;
    let mut plot_rows = 0;
    for t in &tables {
        for (round, client, values) in t.rows.iter().filter(|r| r.0 <= rounds) {
            for (name, v) in t.metric_names.iter().zip(values) {
                plot.write_record([round.to_string(), client.to_string(), name.clone(), v.to_string(), t.variant.clone()])?;
                plot_rows += 1;
            }
        }
    }
    plot.flush().map_err(|e| Error::io(out, e))?;

    let finals: Vec<BTreeMap<usize, &Vec<f64>>> = tables
        .iter()
        .map(|t| {
            let last = t.rows.iter().filter(|r| r.0 <= rounds).map(|r| r.0).max().unwrap_or(0);
            t.rows
                .iter()
                .filter(|r| r.0 == last)
                .map(|r| (r.1, &r.2))
                .collect()
        })
        .collect();

    let mut acc = csv::Writer::from_writer(create(&out.join(FINAL_ACCURACY))?);
    let groups = &tables[0].manifest.run.data.group_names;
    let mut header = vec!["variant".to_owned(), "client".to_owned(), "overall".to_owned()];
    header.extend(groups.iter().cloned());
    acc.write_record(&header)?;
    for (t, fin) in tables.iter().zip(&finals) {
        let acc_cols: Vec<usize> = std::iter::once("acc_overall".to_owned())
            .chain((0..groups.len()).map(|g| format!("acc_group_{g}")))
            .map(|name| t.metric_names.iter().position(|m| *m == name))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Schema(format!("{}: accuracy columns missing", t.variant)))?;
        let shard: Vec<f64> = {
            let d = &t.manifest.run.data;
            d.client_train_rows
                .iter()
                .zip(&d.client_test_rows)
                .map(|(a, b)| (a + b) as f64)
                .collect()
        };
        let mut plain = vec![0.0; acc_cols.len()];
        let mut weighted = vec![0.0; acc_cols.len()];
        let mut wsum = 0.0;
        for (&client, values) in fin {
            let row: Vec<f64> = acc_cols.iter().map(|&i| values[i]).collect();
            let w = shard.get(client).copied().unwrap_or(0.0);
            for (k, v) in row.iter().enumerate() {
                plain[k] += v / fin.len() as f64;
                weighted[k] += w * v;
            }
            wsum += w;
            let mut rec = vec![t.variant.clone(), client.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            acc.write_record(&rec)?;
        }
        weighted.iter_mut().for_each(|v| *v /= wsum);
        for (label, vals) in [("mean", &plain), ("weighted_mean", &weighted)] {
            let mut rec = vec![t.variant.clone(), label.to_owned()];
            rec.extend(vals.iter().map(f64::to_string));
            acc.write_record(&rec)?;
        }
    }
    acc.flush().map_err(|e| Error::io(out, e))?;

    let mut cmp = csv::Writer::from_writer(create(&out.join(COMPARISON))?);
    let mut header = vec!["client".to_owned(), "metric".to_owned()];
    header.extend(tables.iter().map(|t| t.variant.clone()));
    cmp.write_record(&header)?;
    let clients: Vec<usize> = {
        let mut c: Vec<usize> = finals.iter().flat_map(|f| f.keys().copied()).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    for &client in &clients {
        for name in &tables[0].metric_names {
            let mut rec = vec![client.to_string(), name.clone()];
            for (t, fin) in tables.iter().zip(&finals) {
                let v = t
                    .metric_names
                    .iter()
                    .position(|n| n == name)
                    .and_then(|i| fin.get(&client).map(|vals| vals[i]));
                rec.push(v.map_or_else(String::new, |v| v.to_string()));
            }
            cmp.write_record(&rec)?;
        }
    }
    cmp.flush().map_err(|e| Error::io(out, e))?;

    Ok(ReportSummary {
        rounds,
        truncated,
        plot_rows,
    })
}
