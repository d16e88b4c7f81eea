//! Seeded two-group tabular generator with a tunable amount of group bias.
//!
//! Group `B` (id 1, a minority) has a lower label base rate and shifted
//! features, so an unconstrained classifier ends up with unequal decision
//! rates across groups. `bias = 0` removes every group dependence.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::csv_io::RawDataset;
use super::schema::{ColumnSpec, DataSchema};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::scalar::logistic;

pub const SYNTH_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub bias: f64,
    pub seed: u64,
    #[serde(default = "default_minority")]
    pub minority_fraction: f64,
}

fn default_minority() -> f64 {
    0.35
}

impl SynthConfig {
    pub fn new(rows: usize, bias: f64, seed: u64) -> Self {
        Self {
            rows,
            bias,
            seed,
            minority_fraction: default_minority(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::config("data.synthetic.rows", "must be at least 1"));
        }
        if !(self.bias.is_finite() && self.bias >= 0.0) {
            return Err(Error::config("data.synthetic.bias", "must be finite and >= 0"));
        }
        if !(self.minority_fraction > 0.0 && self.minority_fraction < 1.0) {
            return Err(Error::config("data.synthetic.minority_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

pub fn synthetic_schema() -> DataSchema {
    let mut cols: Vec<ColumnSpec> = (0..SYNTH_FEATURES)
        .map(|j| ColumnSpec::continuous(&format!("x{j}")))
        .collect();
    cols.push(ColumnSpec::categorical("segment", &["s0", "s1", "s2"]));
    cols.push(ColumnSpec::sensitive("group"));
    cols.push(ColumnSpec::label("label", &["0", "1"]));
    DataSchema::new(cols, &["1"], &["A", "B"])
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<RawDataset> {
    cfg.validate()?;
    let mut rng = rng::global(cfg.seed, Purpose::Synthetic);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut rows = Vec::with_capacity(cfg.rows);
    // separate stream for the discrete draws keeps the normal sequence stable
    let mut coin = rng::stream(cfg.seed, Purpose::Synthetic, 1, 0);
    let b = cfg.bias;
    for _ in 0..cfg.rows {
        let minority = coin.random::<f64>() < cfg.minority_fraction;
        let side = if minority { -1.0 } else { 1.0 };
        let merit = normal();
        let x0 = merit + 0.5 * normal();
        let x1 = 0.6 * merit + 0.6 * b * side + 0.6 * normal();
        let x2 = 0.9 * b * side + normal();
        let x3 = normal();
        let p_seg = if minority { 0.5 + 0.3 * b.min(1.0) } else { 0.5 - 0.3 * b.min(1.0) };
        let segment = if coin.random::<f64>() < p_seg {
            "s0"
        } else if coin.random::<f64>() < 0.5 {
            "s1"
        } else {
            "s2"
        };
        let logit = 1.6 * merit - 0.2 - 1.4 * b * f64::from(u8::from(minority));
        let label = coin.random::<f64>() < logistic(logit);
        rows.push(vec![
            format!("{x0:.6}"),
            format!("{x1:.6}"),
            format!("{x2:.6}"),
            format!("{x3:.6}"),
            segment.to_owned(),
            if minority { "B" } else { "A" }.to_owned(),
            if label { "1" } else { "0" }.to_owned(),
        ]);
    }
    Ok(RawDataset {
        columns: synthetic_schema().names(),
        rows,
        ..RawDataset::default()
    })
}

pub fn write_csv(raw: &RawDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(&raw.columns)?;
    for row in &raw.rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}
