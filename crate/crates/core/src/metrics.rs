//! Per-image evaluation metrics, occlusion-stratified aggregation and timing
//! instrumentation.
//!
//! RMSE and the correlation coefficient are computed per image over all
//! branch channels of the rows that are valid in the ground truth, then
//! aggregated as mean ± std across images (population convention, stated in
//! the report metadata).

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::target::PositionTarget;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction shape {0} does not match ground truth {1}")]
    ShapeMismatch(String, String),
    #[error("prediction has no coordinate for ground-truth row {0}")]
    CoverageGap(usize),
    #[error("prediction covers no rows at all")]
    EmptyPrediction,
    #[error("ground truth has no valid rows")]
    NoValidRows,
    #[error("zero variance in {0} series, correlation undefined")]
    DegenerateVariance(&'static str),
}

/// Prediction method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HobCnn,
    VisibleCf,
    WholeCf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::HobCnn => "hob_cnn",
            Method::VisibleCf => "visible_cf",
            Method::WholeCf => "whole_cf",
        }
    }

    pub const ALL: [Method; 3] = [Method::HobCnn, Method::VisibleCf, Method::WholeCf];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wall-clock stage timings in milliseconds.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub model_ms: f64,
    pub curve_fit_ms: f64,
    pub total_ms: f64,
}

/// Per-image evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub method: Method,
    pub rmse: f64,
    pub r: f64,
    pub occlusion_fraction: f64,
    /// Ground-truth rows the prediction did not cover (filled from the
    /// nearest predicted row before scoring).
    pub coverage_gaps: usize,
    pub timings: StageTimings,
    /// Error-category tags attached to hard samples.
    pub error_tags: Vec<String>,
}

fn check_shapes(gt: &PositionTarget, pred: &PositionTarget) -> Result<(), MetricError> {
    if gt.n_branches() != pred.n_branches() || gt.height != pred.height || gt.width != pred.width {
        return Err(MetricError::ShapeMismatch(
            format!("{}x{}x{}", pred.n_branches(), pred.height, pred.width),
            format!("{}x{}x{}", gt.n_branches(), gt.height, gt.width),
        ));
    }
    Ok(())
}

/// Pair up ground-truth and prediction values over gt-valid rows, resolving
/// prediction gaps with the nearest predicted row (ties toward smaller row).
fn paired_values(
    gt: &PositionTarget,
    pred: &PositionTarget,
    strict: bool,
) -> Result<(Vec<f64>, Vec<f64>, usize), MetricError> {
    check_shapes(gt, pred)?;
    if gt.n_valid() == 0 {
        return Err(MetricError::NoValidRows);
    }
    let pred_rows: Vec<usize> = pred.valid_rows().collect();
    if pred_rows.is_empty() {
        return Err(MetricError::EmptyPrediction);
    }
    let mut g = Vec::new();
    let mut p = Vec::new();
    let mut gaps = 0usize;
    for r in gt.valid_rows() {
        let src = if pred.valid[r] {
            r
        } else {
            if strict {
                return Err(MetricError::CoverageGap(r));
            }
            gaps += 1;
            // Nearest valid prediction row; ties break toward the smaller.
            *pred_rows
                .iter()
                .min_by_key(|&&pr| {
                    let d = pr.abs_diff(r);
                    (d, pr)
                })
                .unwrap()
        };
        for b in 0..gt.n_branches() {
            g.push(gt.coords[b][r]);
            p.push(pred.coords[b][src]);
        }
    }
    Ok((g, p, gaps))
}

/// Root mean squared error in pixels over all branch entries of gt-valid
/// rows. Errors with [`MetricError::CoverageGap`] when the prediction misses
/// a row.
pub fn rmse(gt: &PositionTarget, pred: &PositionTarget) -> Result<f64, MetricError> {
    let (g, p, _) = paired_values(gt, pred, true)?;
    Ok(rmse_of(&g, &p))
}

/// RMSE with nearest-row gap filling; also reports how many rows were
/// filled.
pub fn rmse_with_gap_fill(
    gt: &PositionTarget,
    pred: &PositionTarget,
) -> Result<(f64, usize), MetricError> {
    let (g, p, gaps) = paired_values(gt, pred, false)?;
    Ok((rmse_of(&g, &p), gaps))
}

fn rmse_of(g: &[f64], p: &[f64]) -> f64 {
    let n = g.len() as f64;
    let ss: f64 = g.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
    (ss / n).sqrt()
}

/// RMSE over two plain series of equal length.
pub fn rmse_series(g: &[f64], p: &[f64]) -> Result<f64, MetricError> {
    if g.len() != p.len() {
        return Err(MetricError::ShapeMismatch(
            p.len().to_string(),
            g.len().to_string(),
        ));
    }
    if g.is_empty() {
        return Err(MetricError::NoValidRows);
    }
    Ok(rmse_of(g, p))
}

/// Pearson correlation over two plain series of equal length.
pub fn pearson_series(g: &[f64], p: &[f64]) -> Result<f64, MetricError> {
    if g.len() != p.len() {
        return Err(MetricError::ShapeMismatch(
            p.len().to_string(),
            g.len().to_string(),
        ));
    }
    pearson_of(g, p)
}

/// Pearson correlation between prediction and ground truth over all branch
/// entries of gt-valid rows (channels concatenated).
pub fn pearson_r(gt: &PositionTarget, pred: &PositionTarget) -> Result<f64, MetricError> {
    let (g, p, _) = paired_values(gt, pred, true)?;
    pearson_of(&g, &p)
}

/// Pearson correlation with nearest-row gap filling.
pub fn pearson_r_with_gap_fill(
    gt: &PositionTarget,
    pred: &PositionTarget,
) -> Result<f64, MetricError> {
    let (g, p, _) = paired_values(gt, pred, false)?;
    pearson_of(&g, &p)
}

pub(crate) fn pearson_of(g: &[f64], p: &[f64]) -> Result<f64, MetricError> {
    if g.len() < 2 {
        return Err(MetricError::NoValidRows);
    }
    let n = g.len() as f64;
    let gm = g.iter().sum::<f64>() / n;
    let pm = p.iter().sum::<f64>() / n;
    let mut sgp = 0.0;
    let mut sgg = 0.0;
    let mut spp = 0.0;
    for (a, b) in g.iter().zip(p) {
        let da = a - gm;
        let db = b - pm;
        sgp += da * db;
        sgg += da * da;
        spp += db * db;
    }
    if sgg == 0.0 {
        return Err(MetricError::DegenerateVariance("ground truth"));
    }
    if spp == 0.0 {
        return Err(MetricError::DegenerateVariance("prediction"));
    }
    Ok(sgp / (sgg * spp).sqrt())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Statistics of one occlusion bucket for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketStat {
    pub bucket_lo: f64,
    pub bucket_hi: f64,
    pub method: Method,
    pub count: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub mean_r: f64,
    pub std_r: f64,
}

/// Group records into half-open occlusion buckets `[k·w, (k+1)·w)` per
/// method; empty buckets are omitted.
pub fn stratify_by_occlusion(records: &[EvalRecord], bucket_width: f64) -> Vec<BucketStat> {
    let mut groups: BTreeMap<(usize, Method), Vec<&EvalRecord>> = BTreeMap::new();
    for rec in records {
        let idx = (rec.occlusion_fraction / bucket_width).floor() as usize;
        groups.entry((idx, rec.method)).or_default().push(rec);
    }
    groups
        .into_iter()
        .map(|((idx, method), recs)| {
            let rmses: Vec<f64> = recs.iter().map(|r| r.rmse).collect();
            let rs: Vec<f64> = recs.iter().map(|r| r.r).collect();
            let (mean_rmse, std_rmse) = mean_std(&rmses);
            let (mean_r, std_r) = mean_std(&rs);
            BucketStat {
                bucket_lo: idx as f64 * bucket_width,
                bucket_hi: (idx + 1) as f64 * bucket_width,
                method,
                count: recs.len(),
                mean_rmse,
                std_rmse,
                mean_r,
                std_r,
            }
        })
        .collect()
}

/// One aggregated row of the evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub condition: String,
    pub count: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub mean_r: f64,
    pub std_r: f64,
    pub mean_coverage_gaps: f64,
}

/// Aggregated evaluation tables: mean ± std per method per condition plus a
/// pooled total row per method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Dispersion convention for every std in this report.
    pub std_convention: String,
    pub rows: Vec<ReportRow>,
    pub record_count: usize,
}

/// Condition ordering: occlusion regimes in canonical order first, anything
/// else alphabetically after.
fn condition_order(conditions: &[String]) -> Vec<String> {
    let canonical = ["none", "medium", "heavy"];
    let mut out: Vec<String> = canonical
        .iter()
        .filter(|c| conditions.iter().any(|x| x == *c))
        .map(|c| c.to_string())
        .collect();
    let mut rest: Vec<String> = conditions
        .iter()
        .filter(|c| !canonical.contains(&c.as_str()))
        .cloned()
        .collect();
    rest.sort();
    rest.dedup();
    out.extend(rest);
    out
}

/// Build the aggregated report. `condition_of` maps a sample id to its
/// condition label (for synthetic data, the occlusion regime).
pub fn aggregate_report(
    records: &[EvalRecord],
    condition_of: &BTreeMap<String, String>,
) -> EvalReport {
    let mut conditions: Vec<String> = records
        .iter()
        .map(|r| {
            condition_of
                .get(&r.sample_id)
                .cloned()
                .unwrap_or_else(|| "unknown".into())
        })
        .collect();
    conditions.sort();
    conditions.dedup();
    let ordered = condition_order(&conditions);

    let mut rows = Vec::new();
    for method in Method::ALL {
        let of_method: Vec<&EvalRecord> =
            records.iter().filter(|r| r.method == method).collect();
        if of_method.is_empty() {
            continue;
        }
        let mut push_row = |condition: String, recs: &[&EvalRecord]| {
            let rmses: Vec<f64> = recs.iter().map(|r| r.rmse).collect();
            let rs: Vec<f64> = recs.iter().map(|r| r.r).collect();
            let gaps: f64 = recs.iter().map(|r| r.coverage_gaps as f64).sum::<f64>()
                / recs.len() as f64;
            let (mean_rmse, std_rmse) = mean_std(&rmses);
            let (mean_r, std_r) = mean_std(&rs);
            rows.push(ReportRow {
                method,
                condition,
                count: recs.len(),
                mean_rmse,
                std_rmse,
                mean_r,
                std_r,
                mean_coverage_gaps: gaps,
            });
        };
        for cond in &ordered {
            let recs: Vec<&EvalRecord> = of_method
                .iter()
                .filter(|r| condition_of.get(&r.sample_id).map(String::as_str) == Some(cond))
                .copied()
                .collect();
            if !recs.is_empty() {
                push_row(cond.clone(), &recs);
            }
        }
        // Pooled total over all records, not a mean of per-condition means.
        push_row("total".into(), &of_method);
    }
    EvalReport {
        std_convention: "population".into(),
        rows,
        record_count: records.len(),
    }
}

/// Wall-clock measurement around an operation, in fractional milliseconds.
pub fn timed<T>(op: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = op();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target_from(coords: &[f64], width: usize) -> PositionTarget {
        let mut t = PositionTarget::new(1, width, coords.len());
        t.coords[0] = coords.to_vec();
        t.valid = vec![true; coords.len()];
        t
    }

    #[test]
    fn rmse_identities() {
        let g = target_from(&[0.0, 0.0, 0.0], 64);
        let p = target_from(&[3.0, 4.0, 0.0], 64);
        assert_eq!(rmse(&g, &g).unwrap(), 0.0);
        let e = rmse(&g, &p).unwrap();
        assert!((e - (25.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // Symmetry.
        assert_eq!(e, rmse(&p, &g).unwrap());
    }

    #[test]
    fn rmse_constant_offset_exact() {
        let g = target_from(&[5.0, 9.5, 30.0, 12.25], 64);
        let mut p = g.clone();
        for v in &mut p.coords[0] {
            *v += 2.0;
        }
        assert!((rmse(&g, &p).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_coverage_gap_strict_vs_filled() {
        let g = target_from(&[10.0, 10.0, 10.0, 10.0], 64);
        let mut p = target_from(&[10.0, 10.0, 12.0, 12.0], 64);
        p.valid = vec![false, true, true, false];
        match rmse(&g, &p) {
            Err(MetricError::CoverageGap(0)) => {}
            other => panic!("expected CoverageGap(0), got {other:?}"),
        }
        let (e, gaps) = rmse_with_gap_fill(&g, &p).unwrap();
        assert_eq!(gaps, 2);
        // Row 0 borrows row 1 (err 0), row 3 borrows row 2 (err 2).
        assert!((e - (8.0f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pearson_identities() {
        let g = target_from(&[1.0, 2.0, 5.0, 9.0], 64);
        assert!((pearson_r(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let mut affine = g.clone();
        for v in &mut affine.coords[0] {
            *v = 2.0 * *v + 3.0;
        }
        assert!((pearson_r(&g, &affine).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = g.clone();
        for v in &mut neg.coords[0] {
            *v = -*v;
        }
        assert!((pearson_r(&g, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_variance() {
        let g = target_from(&[4.0, 4.0, 4.0], 64);
        let p = target_from(&[1.0, 2.0, 3.0], 64);
        assert!(matches!(
            pearson_r(&g, &p),
            Err(MetricError::DegenerateVariance("ground truth"))
        ));
        assert!(matches!(
            pearson_r(&p, &g),
            Err(MetricError::DegenerateVariance("prediction"))
        ));
    }

    fn record(id: &str, method: Method, rmse: f64, r: f64, occ: f64) -> EvalRecord {
        EvalRecord {
            sample_id: id.into(),
            method,
            rmse,
            r,
            occlusion_fraction: occ,
            coverage_gaps: 0,
            timings: StageTimings::default(),
            error_tags: Vec::new(),
        }
    }

    #[test]
    fn stratify_population_std_and_bucket_edges() {
        let recs = vec![
            record("a", Method::HobCnn, 2.0, 0.9, 0.01),
            record("b", Method::HobCnn, 4.0, 0.9, 0.04),
            record("c", Method::HobCnn, 1.0, 0.9, 0.05),
        ];
        let buckets = stratify_by_occlusion(&recs, 0.05);
        assert_eq!(buckets.len(), 2);
        // First bucket [0, 0.05): mean 3, population std 1.
        assert_eq!(buckets[0].count, 2);
        assert!((buckets[0].mean_rmse - 3.0).abs() < 1e-12);
        assert!((buckets[0].std_rmse - 1.0).abs() < 1e-12);
        // Fraction exactly 0.05 falls into the second bucket.
        assert_eq!(buckets[1].count, 1);
        assert!((buckets[1].bucket_lo - 0.05).abs() < 1e-12);
    }

    #[test]
    fn stratify_partitions_records() {
        let recs: Vec<EvalRecord> = (0..37)
            .map(|i| {
                record(
                    &format!("s{i}"),
                    Method::VisibleCf,
                    i as f64,
                    0.5,
                    (i as f64) / 40.0,
                )
            })
            .collect();
        let buckets = stratify_by_occlusion(&recs, 0.05);
        let total: usize = buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, 37);
    }

    #[test]
    fn aggregate_single_record_and_pooled_total() {
        let mut cond = BTreeMap::new();
        cond.insert("a".to_string(), "none".to_string());
        let recs = vec![record("a", Method::HobCnn, 2.5, 0.99, 0.0)];
        let rep = aggregate_report(&recs, &cond);
        // One condition row plus the total row.
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.rows[0].mean_rmse, 2.5);
        assert_eq!(rep.rows[0].std_rmse, 0.0);
        assert_eq!(rep.std_convention, "population");

        // Pooled total differs from the mean of per-condition means when
        // conditions have different sizes.
        let mut cond = BTreeMap::new();
        cond.insert("a".into(), "none".into());
        cond.insert("b".into(), "none".into());
        cond.insert("c".into(), "heavy".into());
        let recs = vec![
            record("a", Method::HobCnn, 1.0, 0.9, 0.0),
            record("b", Method::HobCnn, 3.0, 0.9, 0.0),
            record("c", Method::HobCnn, 5.0, 0.9, 0.4),
        ];
        let rep = aggregate_report(&recs, &cond);
        let total = rep.rows.iter().find(|r| r.condition == "total").unwrap();
        assert!((total.mean_rmse - 3.0).abs() < 1e-12);
        let mean_of_means = (2.0 + 5.0) / 2.0;
        assert!((total.mean_rmse - mean_of_means).abs() > 0.1);
    }

    #[test]
    fn pooled_total_matches_weighted_moment_combination() {
        // Equal-sized conditions: the pooled mean is the mean of condition
        // means and the pooled variance is E[var] + Var[mean].
        let mut cond = BTreeMap::new();
        let values = [(1.0, "none"), (3.0, "none"), (4.0, "heavy"), (8.0, "heavy")];
        let mut recs = Vec::new();
        for (i, (v, c)) in values.iter().enumerate() {
            let id = format!("s{i}");
            cond.insert(id.clone(), c.to_string());
            recs.push(record(&id, Method::HobCnn, *v, 0.9, 0.0));
        }
        let rep = aggregate_report(&recs, &cond);
        let row = |c: &str| rep.rows.iter().find(|r| r.condition == c).unwrap();
        let (m_none, m_heavy) = (row("none").mean_rmse, row("heavy").mean_rmse);
        let (s_none, s_heavy) = (row("none").std_rmse, row("heavy").std_rmse);
        let total = row("total");
        let combined_mean = (m_none + m_heavy) / 2.0;
        assert!((total.mean_rmse - combined_mean).abs() < 1e-12);
        let combined_var = (s_none * s_none + s_heavy * s_heavy) / 2.0
            + ((m_none - combined_mean).powi(2) + (m_heavy - combined_mean).powi(2)) / 2.0;
        assert!((total.std_rmse * total.std_rmse - combined_var).abs() < 1e-12);
    }

    #[test]
    fn aggregate_report_shape_three_methods_four_rows() {
        let mut cond = BTreeMap::new();
        let mut recs = Vec::new();
        let mut i = 0;
        for c in ["none", "medium", "heavy"] {
            for m in Method::ALL {
                for _ in 0..2 {
                    let id = format!("s{i}");
                    cond.insert(id.clone(), c.to_string());
                    recs.push(record(&id, m, 2.0, 0.9, 0.1));
                    i += 1;
                }
            }
        }
        let rep = aggregate_report(&recs, &cond);
        // 3 methods × (3 conditions + total).
        assert_eq!(rep.rows.len(), 12);
        let conds: Vec<&str> = rep
            .rows
            .iter()
            .take(4)
            .map(|r| r.condition.as_str())
            .collect();
        assert_eq!(conds, vec!["none", "medium", "heavy", "total"]);
    }

    #[test]
    fn timed_noop_under_a_millisecond() {
        let (_, ms) = timed(|| 1 + 1);
        assert!(ms < 1.0, "no-op measured {ms} ms");
        assert!(ms > 0.0);
    }
}
