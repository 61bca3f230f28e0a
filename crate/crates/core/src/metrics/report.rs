//! Per-item metric reports and cohort summaries.

use std::fmt::Write;

use serde::Serialize;

use super::{compactness, dice, hausdorff};
use crate::error::{Error, Result};
use crate::volume::Mask;

/// Metrics of one prediction against its ground truth. Compactness (of the
/// prediction) and Hausdorff distance are absent for items whose ground
/// truth is empty, and when the prediction itself is empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub id: String,
    pub dice: f64,
    pub compactness: Option<f64>,
    pub hausdorff_mm: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(id: impl Into<String>, pred: &Mask, gt: &Mask) -> Result<Self> {
        let lesion = gt.count() > 0;
        Ok(MetricReport {
            id: id.into(),
            dice: dice(pred, gt)?,
            compactness: if lesion { compactness(pred) } else { None },
            hausdorff_mm: hausdorff(pred, gt)?,
        })
    }
}

/// Mean and sample standard deviation over the items where a value exists.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
        let std = mean
            .filter(|_| n > 1)
            .map(|m| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Stat { n, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub dice: Stat,
    pub compactness: Stat,
    pub hausdorff_mm: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortEvaluation {
    pub reports: Vec<MetricReport>,
    pub summary: Summary,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CohortEvaluation {
    /// `id,dice,compactness,hausdorff_mm` with empty cells for absent values.
    pub fn items_csv(&self) -> String {
        let mut s = String::from("id,dice,compactness,hausdorff_mm\n");
        for r in &self.reports {
            writeln!(s, "{},{},{},{}", r.id, r.dice, cell(r.compactness), cell(r.hausdorff_mm)).expect("string write");
        }
        s
    }

    /// `metric,n,mean,std`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,n,mean,std\n");
        let m = &self.summary;
        for (name, st) in [("dice", &m.dice), ("compactness", &m.compactness), ("hausdorff_mm", &m.hausdorff_mm)] {
            writeln!(s, "{name},{},{},{}", st.n, cell(st.mean), cell(st.std)).expect("string write");
        }
        s
    }
}

/// Evaluates matched `(id, mask)` lists; ids must agree pairwise.
pub fn evaluate_cohort(preds: &[(String, Mask)], gts: &[(String, Mask)]) -> Result<CohortEvaluation> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let reports = preds
        .iter()
        .zip(gts)
        .map(|((pid, p), (gid, g))| {
            if pid != gid {
                return Err(Error::contract(format!("prediction '{pid}' paired with ground truth '{gid}'")));
            }
            MetricReport::evaluate(pid.clone(), p, g)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary {
        dice: Stat::of(reports.iter().map(|r| r.dice)),
        compactness: Stat::of(reports.iter().filter_map(|r| r.compactness)),
        hausdorff_mm: Stat::of(reports.iter().filter_map(|r| r.hausdorff_mm)),
    };
    Ok(CohortEvaluation { reports, summary })
}
