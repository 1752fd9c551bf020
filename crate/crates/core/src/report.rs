//! Report assembly: merge per-run metric rows into per-dataset and
//! group-average tables with mean and standard deviation over seeds.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{mean_std, MetricsReport, ModelTag};

const MODEL_ORDER: [ModelTag; 5] = [
    ModelTag::MultiHead,
    ModelTag::DatasetSpecific,
    ModelTag::Teacher,
    ModelTag::JointTeacher,
    ModelTag::Student,
];

/// Aggregated cell: mean and standard deviation over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AggCell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregate over seeds, keyed `(model, dataset, metric)`.
pub fn aggregate(report: &MetricsReport) -> BTreeMap<(String, String, String), AggCell> {
    let mut grouped: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        grouped
            .entry((r.model.to_string(), r.dataset.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    grouped
        .into_iter()
        .map(|(k, vs)| {
            let (mean, std) = mean_std(&vs);
            (k, AggCell { mean, std, n: vs.len() })
        })
        .collect()
}

/// Load and merge `report.csv` files from run directories.
pub fn merge_reports(run_dirs: &[&Path]) -> Result<MetricsReport> {
    if run_dirs.is_empty() {
        return Err(Error::MissingPrerequisite("at least one completed run".into()));
    }
    let mut merged = MetricsReport::default();
    for dir in run_dirs {
        let path = dir.join("report.csv");
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "report.csv in {}",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        merged.extend(&MetricsReport::from_csv(&text)?);
    }
    Ok(merged)
}

/// CSV of the aggregate table: `model,dataset,metric,mean,std,n`.
pub fn aggregate_csv(report: &MetricsReport) -> String {
    let agg = aggregate(report);
    let mut out = String::from("model,dataset,metric,mean,std,n\n");
    for ((model, dataset, metric), cell) in &agg {
        out.push_str(&format!(
            "{model},{dataset},{metric},{:.6},{:.6},{}\n",
            cell.mean, cell.std, cell.n
        ));
    }
    out
}

/// Aligned plain-text tables: one per dataset plus a group average, rows in
/// model order, one column per metric. Missing cells render as `-` and are
/// flagged beneath the table.
pub fn render_tables(report: &MetricsReport) -> String {
    let agg = aggregate(report);
    let mut datasets: Vec<String> = agg.keys().map(|k| k.1.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut metrics: Vec<String> = agg
        .keys()
        .map(|k| k.2.clone())
        .filter(|m| m != "hd95_defined")
        .collect();
    metrics.sort();
    metrics.dedup();
    let models: Vec<String> = MODEL_ORDER
        .iter()
        .map(|m| m.to_string())
        .filter(|m| agg.keys().any(|k| &k.0 == m))
        .collect();

    let mut out = String::new();
    let mut gaps = Vec::new();
    for dataset in &datasets {
        out.push_str(&format!("== {dataset} ==\n"));
        out.push_str(&render_one_table(&models, &metrics, |model, metric| {
            agg.get(&(model.to_string(), dataset.clone(), metric.to_string())).cloned()
        }, &mut gaps, dataset));
        out.push('\n');
    }

    if datasets.len() > 1 {
        out.push_str("== group average ==\n");
        out.push_str(&render_one_table(&models, &metrics, |model, metric| {
            // mean over datasets of the per-dataset means
            let cells: Vec<&AggCell> = datasets
                .iter()
                .filter_map(|d| agg.get(&(model.to_string(), d.clone(), metric.to_string())))
                .collect();
            if cells.len() == datasets.len() {
                let mean = cells.iter().map(|c| c.mean).sum::<f64>() / cells.len() as f64;
                let std = cells.iter().map(|c| c.std).sum::<f64>() / cells.len() as f64;
                Some(AggCell { mean, std, n: cells[0].n })
            } else {
                None
            }
        }, &mut gaps, "group"));
    }

    if !gaps.is_empty() {
        out.push_str("\nmissing cells: ");
        out.push_str(&gaps.join(", "));
        out.push('\n');
    }
    out
}

fn render_one_table<F>(
    models: &[String],
    metrics: &[String],
    mut cell: F,
    gaps: &mut Vec<String>,
    dataset: &str,
) -> String
where
    F: FnMut(&str, &str) -> Option<AggCell>,
{
    let width = 18;
    let mut out = format!("{:<18}", "model");
    for m in metrics {
        out.push_str(&format!("{m:>width$}"));
    }
    out.push('\n');
    for model in models {
        out.push_str(&format!("{model:<18}"));
        for metric in metrics {
            match cell(model, metric) {
                Some(c) => out.push_str(&format!(
                    "{:>width$}",
                    format!("{:.2} ± {:.2}", c.mean, c.std)
                )),
                None => {
                    gaps.push(format!("{model}/{dataset}/{metric}"));
                    out.push_str(&format!("{:>width$}", "-"));
                }
            }
        }
        out.push('\n');
    }
    out
}
