//! Retrieval and navigation metrics, report formatting, and the ablation
//! runner.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::map::{build_map, MapIndex};
use crate::model::{Model, ModelConfig, TrainConfig, Variant};
use crate::nav::Episode;
use crate::world::distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: u32,
    pub predicted: u32,
    pub ground_truth: u32,
    /// Distance between the predicted and the true closest exemplar.
    pub error: f64,
    /// Distance from the query to its true closest exemplar.
    pub gt_distance: f64,
}

/// Retrieves the closest exemplar for each query. Queries must carry
/// ground truth.
pub fn predict(model: &Model, map: &MapIndex, queries: &[Sample]) -> Result<Vec<Prediction>> {
    map.check_model(model.hash())?;
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let (Some(gt), Some(gt_distance)) = (q.record.gt_closest, q.record.gt_distance) else {
            return Err(Error::invalid(format!(
                "query {} has no ground truth",
                q.record.id
            )));
        };
        let res = map.query(&model.forward(&q.image.pixels)?)?;
        let error = distance(map.get(res.best)?.position, map.get(gt)?.position);
        out.push(Prediction {
            query_id: q.record.id,
            predicted: res.best,
            ground_truth: gt,
            error,
            gt_distance,
        });
    }
    Ok(out)
}

/// `0, 0.1, …, 1.0`
pub fn default_tolerances() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// `(0, 0.5], (0.5, 1], (1, 1.5], (1.5, 2]`
pub fn default_bins() -> Vec<(f64, f64)> {
    (0..4)
        .map(|k| (k as f64 * 0.5, (k + 1) as f64 * 0.5))
        .collect()
}

/// Fraction of predictions within `e` of the true closest exemplar; at
/// `e = 0` only the exact exemplar counts.
pub fn recall_at(predictions: &[Prediction], e: f64) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .filter(|p| {
            if e == 0.0 {
                p.predicted == p.ground_truth
            } else {
                p.error <= e
            }
        })
        .count();
    hits as f64 / predictions.len() as f64
}

pub fn recall_tolerance(predictions: &[Prediction], tolerances: &[f64]) -> Vec<(f64, f64)> {
    tolerances
        .iter()
        .map(|&e| (e, recall_at(predictions, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub recall: f64,
}

/// Recall at tolerance `e` among queries whose distance to their true
/// closest exemplar lies in `(lo, hi]`. Empty bins are left out.
pub fn recall_distance(
    predictions: &[Prediction],
    bins: &[(f64, f64)],
    e: f64,
) -> Vec<DistanceBin> {
    bins.iter()
        .filter_map(|&(lo, hi)| {
            let inside: Vec<Prediction> = predictions
                .iter()
                .filter(|p| p.gt_distance > lo && p.gt_distance <= hi)
                .cloned()
                .collect();
            (!inside.is_empty()).then(|| DistanceBin {
                lo,
                hi,
                count: inside.len(),
                recall: recall_at(&inside, e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavStats {
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean steps over successful episodes; `None` without successes.
    pub avg_steps: Option<f64>,
}

pub fn nav_stats(episodes: &[Episode]) -> NavStats {
    let wins: Vec<&Episode> = episodes.iter().filter(|e| e.success).collect();
    NavStats {
        episodes: episodes.len(),
        success_rate: if episodes.is_empty() {
            0.0
        } else {
            wins.len() as f64 / episodes.len() as f64
        },
        avg_steps: (!wins.is_empty())
            .then(|| wins.iter().map(|e| e.steps as f64).sum::<f64>() / wins.len() as f64),
    }
}

/// Spearman rank correlation, with tied values given their mean rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut start = 0;
        while start < idx.len() {
            let mut end = start + 1;
            while end < idx.len() && v[idx[end]] == v[idx[start]] {
                end += 1;
            }
            let mean = (start + end - 1) as f64 / 2.0;
            for &i in &idx[start..end] {
                r[i] = mean;
            }
            start = end;
        }
        r
    }
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub recall_tolerance: Vec<(f64, f64)>,
    pub recall_distance: Vec<DistanceBin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nav: Option<NavStats>,
}

#[derive(Clone, Copy, Serialize)]
struct Row<'a> {
    variant: &'a str,
    seed: u64,
    config_hash: &'a str,
    metric: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

impl MetricReport {
    pub fn new(
        variant: &str,
        seed: u64,
        config_hash: &str,
        predictions: &[Prediction],
        tolerances: &[f64],
        bins: &[(f64, f64)],
    ) -> Self {
        MetricReport {
            variant: variant.into(),
            seed,
            config_hash: config_hash.into(),
            recall_tolerance: recall_tolerance(predictions, tolerances),
            recall_distance: recall_distance(predictions, bins, 0.5),
            nav: None,
        }
    }

    /// Mean recall over the tolerances up to `e_max`.
    pub fn mean_recall_upto(&self, e_max: f64) -> f64 {
        let picked: Vec<f64> = self
            .recall_tolerance
            .iter()
            .filter(|(e, _)| *e <= e_max + 1e-12)
            .map(|&(_, r)| r)
            .collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }

    pub fn recall(&self, e: f64) -> Option<f64> {
        self.recall_tolerance
            .iter()
            .find(|(t, _)| (t - e).abs() < 1e-12)
            .map(|&(_, r)| r)
    }

    /// One JSON object per metric value.
    pub fn to_jsonl(&self) -> String {
        let base = Row {
            variant: &self.variant,
            seed: self.seed,
            config_hash: &self.config_hash,
            metric: "",
            e: None,
            lo: None,
            hi: None,
            count: None,
            value: None,
        };
        let mut rows = Vec::new();
        for &(e, r) in &self.recall_tolerance {
            rows.push(Row {
                metric: "recall_tolerance",
                e: Some(e),
                value: Some(r),
                ..base
            });
        }
        for b in &self.recall_distance {
            rows.push(Row {
                metric: "recall_distance",
                e: Some(0.5),
                lo: Some(b.lo),
                hi: Some(b.hi),
                count: Some(b.count),
                value: Some(b.recall),
                ..base
            });
        }
        if let Some(nav) = &self.nav {
            rows.push(Row {
                metric: "nav_success_rate",
                count: Some(nav.episodes),
                value: Some(nav.success_rate),
                ..base
            });
            rows.push(Row {
                metric: "nav_avg_steps",
                value: nav.avg_steps,
                ..base
            });
        }
        rows.iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }
}

#[derive(Deserialize)]
struct RowIn {
    variant: String,
    seed: u64,
    config_hash: String,
    metric: String,
    e: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
    count: Option<usize>,
    value: Option<f64>,
}

/// Parses the output of [`MetricReport::to_jsonl`] (possibly several
/// reports concatenated), keeping report order.
pub fn parse_jsonl(text: &str) -> Result<Vec<MetricReport>> {
    let mut reports: Vec<MetricReport> = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let bad = |reason: String| Error::invalid(format!("report line {}: {reason}", n + 1));
        let row: RowIn = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let same = |r: &MetricReport| {
            r.variant == row.variant && r.seed == row.seed && r.config_hash == row.config_hash
        };
        if !reports.last().is_some_and(same) {
            reports.push(MetricReport {
                variant: row.variant.clone(),
                seed: row.seed,
                config_hash: row.config_hash.clone(),
                recall_tolerance: Vec::new(),
                recall_distance: Vec::new(),
                nav: None,
            });
        }
        let report = reports.last_mut().expect("just pushed");
        let missing = |what: &str| bad(format!("missing {what}"));
        match row.metric.as_str() {
            "recall_tolerance" => report.recall_tolerance.push((
                row.e.ok_or_else(|| missing("e"))?,
                row.value.ok_or_else(|| missing("value"))?,
            )),
            "recall_distance" => report.recall_distance.push(DistanceBin {
                lo: row.lo.ok_or_else(|| missing("lo"))?,
                hi: row.hi.ok_or_else(|| missing("hi"))?,
                count: row.count.ok_or_else(|| missing("count"))?,
                recall: row.value.ok_or_else(|| missing("value"))?,
            }),
            "nav_success_rate" => {
                report.nav = Some(NavStats {
                    episodes: row.count.ok_or_else(|| missing("count"))?,
                    success_rate: row.value.ok_or_else(|| missing("value"))?,
                    avg_steps: None,
                })
            }
            "nav_avg_steps" => {
                report
                    .nav
                    .as_mut()
                    .ok_or_else(|| bad("steps before success rate".into()))?
                    .avg_steps = row.value
            }
            other => return Err(bad(format!("unknown metric {other:?}"))),
        }
    }
    Ok(reports)
}

/// Aligned table with one column per report.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<22}", "metric");
    for r in reports {
        let _ = write!(out, "{:>12}", format!("{}/{}", r.variant, r.seed));
    }
    out.push('\n');
    let mut line = |label: String, values: Vec<Option<f64>>| {
        let _ = write!(out, "{label:<22}");
        for v in values {
            match v {
                Some(v) => {
                    let _ = write!(out, "{v:>12.3}");
                }
                None => {
                    let _ = write!(out, "{:>12}", "-");
                }
            }
        }
        out.push('\n');
    };
    let mut tolerances: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.recall_tolerance.iter().map(|t| t.0))
        .collect();
    tolerances.sort_by(f64::total_cmp);
    tolerances.dedup();
    for e in tolerances {
        line(
            format!("recall@{e:.1}m"),
            reports.iter().map(|r| r.recall(e)).collect(),
        );
    }
    let mut bins: Vec<(f64, f64)> = reports
        .iter()
        .flat_map(|r| r.recall_distance.iter().map(|b| (b.lo, b.hi)))
        .collect();
    bins.sort_by(|a, b| a.0.total_cmp(&b.0));
    bins.dedup();
    for (lo, hi) in bins {
        line(
            format!("recall ({lo:.1},{hi:.1}]m"),
            reports
                .iter()
                .map(|r| {
                    r.recall_distance
                        .iter()
                        .find(|b| b.lo == lo && b.hi == hi)
                        .map(|b| b.recall)
                })
                .collect(),
        );
    }
    if reports.iter().any(|r| r.nav.is_some()) {
        line(
            "nav success".into(),
            reports
                .iter()
                .map(|r| r.nav.as_ref().map(|n| n.success_rate))
                .collect(),
        );
        line(
            "nav avg steps".into(),
            reports
                .iter()
                .map(|r| r.nav.as_ref().and_then(|n| n.avg_steps))
                .collect(),
        );
    }
    out
}

/// Inputs shared by every arm of an ablation run.
pub struct MatrixInputs<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub train_samples: &'a [Sample],
    pub map_samples: &'a [Sample],
    pub queries: &'a [Sample],
    pub tolerances: &'a [f64],
    pub bins: &'a [(f64, f64)],
    pub config_hash: &'a str,
}

/// Trains and evaluates each variant for each seed, then an untrained
/// model per seed as the random-weights baseline (named `random`).
pub fn run_matrix(
    inputs: &MatrixInputs,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    let mut evaluate = |name: &str, seed: u64, model: &Model| -> Result<()> {
        let map = build_map(model, inputs.map_samples)?;
        let preds = predict(model, &map, inputs.queries)?;
        reports.push(MetricReport::new(
            name,
            seed,
            inputs.config_hash,
            &preds,
            inputs.tolerances,
            inputs.bins,
        ));
        Ok(())
    };
    for &v in variants {
        for &seed in seeds {
            let (mc, mut tc) = v.apply(inputs.model, inputs.train);
            tc.seed = seed;
            let mut model = Model::new(mc, seed)?;
            log::info!("training {} (seed {seed})", v.name());
            model.train(inputs.train_samples, &tc)?;
            evaluate(v.name(), seed, &model)?;
        }
    }
    for &seed in seeds {
        evaluate("random", seed, &Model::new(inputs.model.clone(), seed)?)?;
    }
    Ok(reports)
}
