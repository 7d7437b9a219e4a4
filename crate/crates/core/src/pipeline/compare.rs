use serde::Serialize;
use serde_json::{json, Value};

use super::format::json_number;
use super::{MetricTable, ReportMetadata, FORMAT_TAG, METRICS};
use crate::error::{Error, Result};
use crate::stats::{compare_metric, RunRecord, WilcoxonMethod};
use crate::volume::class_name;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub class: String,
    pub metric: String,
    pub display: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: Option<f64>,
    pub method: Option<WilcoxonMethod>,
    pub n_effective: usize,
    pub significant: bool,
}

/// Per-class, per-metric means of two configurations with paired p-values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub config_a: String,
    pub config_b: String,
    pub metadata: ReportMetadata,
    pub rows: Vec<ComparisonRow>,
}

fn single_config(t: &MetricTable, which: &str) -> Result<String> {
    let configs = t.configs();
    if configs.len() != 1 {
        return Err(Error::MetricsTable(format!(
            "table {which} must hold exactly one configuration, found {}",
            configs.len()
        )));
    }
    Ok(configs.into_iter().next().unwrap().to_string())
}

/// Reduces each table to per-patient means and runs a paired test per
/// (class, metric).
pub fn compare_tables(a: &MetricTable, b: &MetricTable) -> Result<ComparisonReport> {
    let config_a = single_config(a, "A")?;
    let config_b = single_config(b, "B")?;
    if a.metadata != b.metadata {
        return Err(Error::MetricsTable(
            "tables were produced with different evaluation settings".into(),
        ));
    }
    if a.classes() != b.classes() {
        return Err(Error::MetricsTable("tables cover different classes".into()));
    }
    let records = |t: &MetricTable, class: u8, metric: &str| -> Vec<RunRecord> {
        t.rows
            .iter()
            .filter(|r| r.class == class)
            .map(|r| RunRecord {
                case_id: r.case_id.clone(),
                fold: r.fold,
                repeat: r.repeat,
                value: r.values[metric],
            })
            .collect()
    };
    let mut rows = Vec::new();
    for class in a.classes() {
        for (metric, display) in METRICS {
            let r = compare_metric(metric, &records(a, class, metric), &records(b, class, metric))?;
            rows.push(ComparisonRow {
                class: class_name(class),
                metric: metric.to_string(),
                display: display.to_string(),
                mean_a: r.mean_a,
                mean_b: r.mean_b,
                p_value: r.p_value,
                method: r.method,
                n_effective: r.n_effective,
                significant: r.significant,
            });
        }
    }
    Ok(ComparisonReport {
        config_a,
        config_b,
        metadata: a.metadata.clone(),
        rows,
    })
}

fn fixed3(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.3}")
    }
}

fn p_text(p: Option<f64>) -> String {
    match p {
        None => "p = \u{2014}".into(),
        Some(p) if p < 0.001 => "p < 0.001".into(),
        Some(p) => format!("p = {p:.3}"),
    }
}

impl ComparisonRow {
    /// `LN Dice 0.734 vs 0.758, p = 0.019`, with ` *` when significant.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} {} {} vs {}, {}",
            self.class,
            self.display,
            fixed3(self.mean_a),
            fixed3(self.mean_b),
            p_text(self.p_value)
        );
        if self.significant {
            s.push_str(" *");
        }
        s
    }
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# {FORMAT_TAG} comparison: A = {}, B = {} (* p < 0.05)\n",
            self.config_a, self.config_b
        );
        for row in &self.rows {
            out.push_str(&row.render());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                json!({
                    "class": r.class,
                    "metric": r.metric,
                    "mean_a": json_number(r.mean_a),
                    "mean_b": json_number(r.mean_b),
                    "p_value": r.p_value.map_or(Value::Null, json_number),
                    "method": r.method,
                    "n_effective": r.n_effective,
                    "significant": r.significant,
                })
            })
            .collect();
        let doc = json!({
            "format": FORMAT_TAG,
            "config_a": self.config_a,
            "config_b": self.config_b,
            "metadata": self.metadata,
            "rows": rows,
        });
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }
}
