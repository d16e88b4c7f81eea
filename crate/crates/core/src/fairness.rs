//! Group fairness losses: demographic parity, equalized odds, disparate impact.
//!
//! The same statistics feed two paths. Training uses soft predictions in
//! `(0, 1)` and needs gradients; reporting thresholds predictions first and
//! reports the largest absolute loss per criterion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_DI_GUARD: f64 = 1e-6;

/// Per-group and per-(group, label) summaries of a prediction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats<T> {
    pub n: usize,
    pub overall_mean: T,
    pub group_counts: Vec<usize>,
    /// `None` for groups with no rows.
    pub group_means: Vec<Option<T>>,
    pub label_counts: [usize; 2],
    pub label_means: [Option<T>; 2],
    /// Indexed `[group][label]`.
    pub cell_counts: Vec<[usize; 2]>,
    pub cell_means: Vec<[Option<T>; 2]>,
    /// Share of each group's rows with prediction above 0.5.
    pub positive_rates: Vec<Option<T>>,
}

impl<T: Scalar> GroupStats<T> {
    pub fn compute(p: &[T], groups: &[usize], labels: &[u8], n_groups: usize) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Empty("group statistics need at least one prediction".into()));
        }
        if p.len() != groups.len() || p.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions, {} group ids, {} labels",
                p.len(),
                groups.len(),
                labels.len()
            )));
        }
        let half = T::lit(0.5);
        let mut total = T::zero();
        let mut g_sum = vec![T::zero(); n_groups];
        let mut g_cnt = vec![0usize; n_groups];
        let mut g_pos = vec![0usize; n_groups];
        let mut y_sum = [T::zero(); 2];
        let mut y_cnt = [0usize; 2];
        let mut c_sum = vec![[T::zero(); 2]; n_groups];
        let mut c_cnt = vec![[0usize; 2]; n_groups];
        for ((&pi, &a), &y) in p.iter().zip(groups).zip(labels) {
            if a >= n_groups {
                return Err(Error::InvalidArgument(format!("group id {a} >= {n_groups}")));
            }
            if y > 1 {
                return Err(Error::InvalidArgument(format!("label {y} is not binary")));
            }
            let y = y as usize;
            total += pi;
            g_sum[a] += pi;
            g_cnt[a] += 1;
            g_pos[a] += usize::from(pi > half);
            y_sum[y] += pi;
            y_cnt[y] += 1;
            c_sum[a][y] += pi;
            c_cnt[a][y] += 1;
        }
        let mean = |s: T, c: usize| (c > 0).then(|| s / T::from_count(c));
        Ok(Self {
            n: p.len(),
            overall_mean: total / T::from_count(p.len()),
            group_means: g_sum.iter().zip(&g_cnt).map(|(&s, &c)| mean(s, c)).collect(),
            positive_rates: g_pos
                .iter()
                .zip(&g_cnt)
                .map(|(&k, &c)| mean(T::from_count(k), c))
                .collect(),
            group_counts: g_cnt,
            label_means: [mean(y_sum[0], y_cnt[0]), mean(y_sum[1], y_cnt[1])],
            label_counts: y_cnt,
            cell_means: c_sum
                .iter()
                .zip(&c_cnt)
                .map(|(s, c)| [mean(s[0], c[0]), mean(s[1], c[1])])
                .collect(),
            cell_counts: c_cnt,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.group_counts.len()
    }

    /// `(group, label)` cells with no rows.
    pub fn empty_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, c) in self.cell_counts.iter().enumerate() {
            for (y, &k) in c.iter().enumerate() {
                if k == 0 {
                    out.push((a, y));
                }
            }
        }
        out
    }
}

pub fn group_stats<T: Scalar>(p: &[T], groups: &[usize], labels: &[u8], n_groups: usize) -> Result<GroupStats<T>> {
    GroupStats::compute(p, groups, labels, n_groups)
}

/// `E[f | A = a] - E[f]` per group; `None` for empty groups.
pub fn demp_loss<T: Scalar>(stats: &GroupStats<T>) -> Vec<Option<T>> {
    stats
        .group_means
        .iter()
        .map(|m| m.map(|m| m - stats.overall_mean))
        .collect()
}

/// `E[f | A = a, Y = y] - E[f | Y = y]` per `[group][label]` cell. Empty
/// cells, and every cell of a label absent from the data, are `None`.
pub fn eo_loss<T: Scalar>(stats: &GroupStats<T>) -> Vec<[Option<T>; 2]> {
    for y in 0..2 {
        if stats.label_counts[y] == 0 {
            log::debug!("label {y} absent; its equalized-odds cells are skipped");
        }
    }
    stats
        .cell_means
        .iter()
        .map(|c| {
            let cell = |y: usize| match (c[y], stats.label_means[y]) {
                (Some(m), Some(base)) => Some(m - base),
                _ => None,
            };
            [cell(0), cell(1)]
        })
        .collect()
}

/// Ratio pairs `(numerator, denominator)` compared by the disparate-impact
/// loss: each adjacent pair `(i + 1, i)` plus the wrap-around `(0, G - 1)`.
/// For two groups this is `(1, 0)` and `(0, 1)`.
pub fn di_pairs(n_groups: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n_groups.saturating_sub(1)).map(|i| (i + 1, i)).collect();
    if n_groups >= 2 {
        pairs.push((0, n_groups - 1));
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiLoss<T> {
    /// `min ratio - 1`; never positive for the pairs in [`di_pairs`].
    pub loss: T,
    /// `max(0, -loss)`.
    pub penalty: T,
    /// Pair attaining the minimum.
    pub argmin: (usize, usize),
}

fn guarded_ratio<T: Scalar>(num: T, den: T, guard: T) -> T {
    if num == den {
        T::one()
    } else {
        num / den.max(guard)
    }
}

/// Disparate-impact loss over per-group positive rates. Each denominator is
/// floored at `guard`; equal rates compare as ratio 1, including `0 / 0`.
pub fn di_loss<T: Scalar>(rates: &[Option<T>], guard: T) -> Result<DiLoss<T>> {
    if rates.len() < 2 {
        return Err(Error::InvalidArgument("disparate impact needs at least two groups".into()));
    }
    let rates: Vec<T> = rates
        .iter()
        .enumerate()
        .map(|(a, r)| r.ok_or_else(|| Error::Empty(format!("group {a} has no samples"))))
        .collect::<Result<_>>()?;
    let mut best: Option<(T, (usize, usize))> = None;
    for (num, den) in di_pairs(rates.len()) {
        let r = guarded_ratio(rates[num], rates[den], guard);
        if best.is_none_or(|(b, _)| r < b) {
            best = Some((r, (num, den)));
        }
    }
    let (min_ratio, argmin) = best.expect("at least one pair");
    let loss = min_ratio - T::one();
    Ok(DiLoss {
        loss,
        penalty: (-loss).max(T::zero()),
        argmin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    MaxAbs,
    MeanAbs,
}

impl Aggregation {
    /// Aggregate of `|v|` over present values; 0 when none are present.
    pub fn apply<T: Scalar>(self, values: impl IntoIterator<Item = Option<T>>) -> T {
        let mut n = 0usize;
        let mut acc = T::zero();
        for v in values.into_iter().flatten() {
            n += 1;
            acc = match self {
                Aggregation::MaxAbs => acc.max(v.abs()),
                Aggregation::MeanAbs => acc + v.abs(),
            };
        }
        match self {
            Aggregation::MeanAbs if n > 0 => acc / T::from_count(n),
            _ => acc,
        }
    }
}

/// Hard-decision fairness errors and accuracies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    /// NaN for groups absent from the data.
    pub group_accuracy: Vec<f64>,
    pub demp_error: f64,
    pub eo_error: f64,
    /// `1 - min ratio` of positive-decision rates; NaN with fewer than two
    /// non-empty groups.
    pub di_error: f64,
}

/// Thresholds `p` at `threshold` (strictly greater is positive) and reports
/// the largest absolute DemP and EO loss and the DI shortfall.
pub fn fairness_report<T: Scalar>(
    p: &[T],
    groups: &[usize],
    labels: &[u8],
    n_groups: usize,
    threshold: T,
) -> Result<FairnessReport> {
    let hard: Vec<f64> = p.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
    let stats = GroupStats::compute(&hard, groups, labels, n_groups)?;
    let demp_error = Aggregation::MaxAbs.apply(demp_loss(&stats));
    let eo_error = Aggregation::MaxAbs.apply(eo_loss(&stats).into_iter().flatten());
    let present: Vec<Option<f64>> = stats.group_means.iter().copied().filter(Option::is_some).collect();
    let di_error = if present.len() >= 2 {
        0.0 - di_loss(&present, DEFAULT_DI_GUARD)?.loss
    } else {
        f64::NAN
    };
    let mut correct = vec![0usize; n_groups];
    for ((&h, &a), &y) in hard.iter().zip(groups).zip(labels) {
        correct[a] += usize::from((h == 1.0) == (y == 1));
    }
    let group_accuracy = correct
        .iter()
        .zip(&stats.group_counts)
        .map(|(&c, &n)| if n == 0 { f64::NAN } else { c as f64 / n as f64 })
        .collect();
    Ok(FairnessReport {
        accuracy: correct.iter().sum::<usize>() as f64 / p.len() as f64,
        group_accuracy,
        demp_error,
        eo_error,
        di_error,
    })
}

/// A differentiable fairness quantity with its gradient in the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTerm<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Soft DemP, EO and DI terms of one batch. DemP and EO terms carry signed
/// losses; the DI term carries `1 - min ratio`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTerms<T> {
    /// Per group; `None` for groups missing from the batch.
    pub demp: Vec<Option<SoftTerm<T>>>,
    /// Per cell, index `2 * group + label`; `None` for skipped cells.
    pub eo: Vec<Option<SoftTerm<T>>>,
    /// `None` when some group is missing from the batch.
    pub di: Option<SoftTerm<T>>,
}

/// Computes the soft terms and their exact gradients with respect to `p`.
/// The DI rates are group means of `p`.
pub fn soft_terms<T: Scalar>(
    p: &[T],
    groups: &[usize],
    labels: &[u8],
    n_groups: usize,
    guard: T,
) -> Result<SoftTerms<T>> {
    let stats = GroupStats::compute(p, groups, labels, n_groups)?;
    let inv_n = T::one() / T::from_count(p.len());
    let inv = |c: usize| T::one() / T::from_count(c);

    let demp = demp_loss(&stats)
        .into_iter()
        .enumerate()
        .map(|(a, l)| {
            l.map(|value| {
                let ia = inv(stats.group_counts[a]);
                let grad = groups
                    .iter()
                    .map(|&g| if g == a { ia - inv_n } else { -inv_n })
                    .collect();
                SoftTerm { value, grad }
            })
        })
        .collect();

    let mut eo = Vec::with_capacity(2 * n_groups);
    for (a, cells) in eo_loss(&stats).into_iter().enumerate() {
        for (y, l) in cells.into_iter().enumerate() {
            eo.push(l.map(|value| {
                let ic = inv(stats.cell_counts[a][y]);
                let iy = inv(stats.label_counts[y]);
                let grad = groups
                    .iter()
                    .zip(labels)
                    .map(|(&g, &yy)| {
                        let mut d = T::zero();
                        if yy as usize == y {
                            d -= iy;
                            if g == a {
                                d += ic;
                            }
                        }
                        d
                    })
                    .collect();
                SoftTerm { value, grad }
            }));
        }
    }

    let di = if n_groups >= 2 && stats.group_means.iter().all(Option::is_some) {
        let d = di_loss(&stats.group_means, guard)?;
        let (num, den) = d.argmin;
        let rn = stats.group_means[num].unwrap();
        let rd = stats.group_means[den].unwrap();
        // d(1 - rn / max(rd, guard)) / dp_i
        let (dn, dd) = if rd > guard {
            (-T::one() / rd, rn / (rd * rd))
        } else {
            (-T::one() / guard, T::zero())
        };
        let inn = inv(stats.group_counts[num]);
        let ind = inv(stats.group_counts[den]);
        let grad = groups
            .iter()
            .map(|&g| {
                let mut v = T::zero();
                if g == num {
                    v += dn * inn;
                }
                if g == den {
                    v += dd * ind;
                }
                v
            })
            .collect();
        Some(SoftTerm {
            value: -d.loss,
            grad,
        })
    } else {
        None
    };
    Ok(SoftTerms { demp, eo, di })
}
