use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{f1_score, DetectionMetrics, GroupRecall, RecallBreakdown};
use super::EvalError;
use crate::prediction::ParseFlags;
use crate::prompting::{StrategyId, Task, TokenBudget};
use crate::taxonomy::Category;

/// Where a report came from. Comparisons require equal taxonomy versions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub taxonomy_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row label in comparison tables (strategy or model name).
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyId>,
    pub task: Task,
    pub provenance: Provenance,
    pub sample_count: usize,
    pub recall: f64,
    pub per_category: BTreeMap<String, GroupRecall>,
    #[serde(default)]
    pub per_group: BTreeMap<String, GroupRecall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<TokenBudget>,
    #[serde(default)]
    pub flags: ParseFlags,
    /// Runs that stopped early on a stage failure.
    #[serde(default)]
    pub failed_runs: usize,
}

impl EvalReport {
    pub fn from_breakdown(
        label: impl Into<String>,
        task: Task,
        provenance: Provenance,
        breakdown: RecallBreakdown,
        detection: Option<DetectionMetrics>,
    ) -> Self {
        Self {
            label: label.into(),
            strategy: None,
            task,
            provenance,
            sample_count: breakdown.samples,
            recall: breakdown.recall,
            per_category: breakdown.per_category,
            per_group: breakdown.per_group,
            detection,
            budget: None,
            flags: breakdown.flags,
            failed_runs: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn from_json(src: &str) -> Result<Self, EvalError> {
        let report: Self = serde_json::from_str(src).map_err(|e| EvalError::MalformedReport(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|e| EvalError::MalformedReport(format!("{}: {e}", path.display())))?;
        Self::from_json(&src).map_err(|e| match e {
            EvalError::MalformedReport(m) => EvalError::MalformedReport(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks metric bounds: rates in `[0, 1]`, average L2 in `[0, √2]`.
    pub fn validate(&self) -> Result<(), EvalError> {
        let rate = |name: String, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(EvalError::OutOfBounds { metric: name, value: v })
            }
        };
        rate("recall".into(), self.recall)?;
        for (k, g) in self.per_category.iter().chain(&self.per_group) {
            rate(format!("recall[{k}]"), g.recall)?;
        }
        if let Some(d) = &self.detection {
            rate("precision".into(), d.precision)?;
            rate("detection recall".into(), d.recall)?;
            rate("f1".into(), d.f1)?;
            if !(0.0..=std::f64::consts::SQRT_2).contains(&d.avg_l2) {
                return Err(EvalError::OutOfBounds {
                    metric: "avg_l2".into(),
                    value: d.avg_l2,
                });
            }
        }
        Ok(())
    }

    /// Flat `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |k: &str, v: String| w.write_record([k, &v]).expect("in-memory csv");
        row("metric", "value".into());
        row("label", self.label.clone());
        row("samples", self.sample_count.to_string());
        row("recall", fmt_rate(self.recall));
        for (k, g) in &self.per_category {
            row(&format!("category:{k}"), fmt_rate(g.recall));
        }
        for (k, g) in &self.per_group {
            row(&format!("group:{k}"), fmt_rate(g.recall));
        }
        if let Some(d) = &self.detection {
            row("precision", fmt_rate(d.precision));
            row("detection_recall", fmt_rate(d.recall));
            row("f1", fmt_rate(d.f1));
            row("avg_l2", fmt_rate(d.avg_l2));
            if let Some(tau) = d.tau {
                row("tau", tau.to_string());
            }
        }
        if let Some(b) = &self.budget {
            row("fixed_prompt_tokens", b.fixed_prompt_tokens.to_string());
            row("image_multiplicity", b.image_multiplicity.to_string());
        }
        finish(w)
    }
}

fn fmt_rate(v: f64) -> String {
    format!("{v:.6}")
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Rounds to six decimals so that differences of two-decimal rates compare
/// exactly against their decimal literals.
pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    /// `overall`, `category` or `group`.
    pub scope: String,
    pub key: String,
    pub a: f64,
    pub b: f64,
    /// `a - b`, rounded to six decimals.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub a: String,
    pub b: String,
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    pub fn get(&self, scope: &str, key: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.scope == scope && r.key == key)
            .map(|r| r.delta)
    }

    pub fn category(&self, category: Category) -> Option<f64> {
        self.get("category", category.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "key", &self.a, &self.b, "delta"])
            .expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.scope.clone(),
                r.key.clone(),
                fmt_rate(r.a),
                fmt_rate(r.b),
                format!("{:+.6}", r.delta),
            ])
            .expect("in-memory csv");
        }
        finish(w)
    }
}

/// Signed recall deltas `a - b` overall, per category and per group. Keys
/// present in only one report are skipped.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<DeltaTable, EvalError> {
    if a.provenance.taxonomy_version != b.provenance.taxonomy_version {
        return Err(EvalError::VersionMismatch {
            a: a.provenance.taxonomy_version.clone(),
            b: b.provenance.taxonomy_version.clone(),
        });
    }
    let row = |scope: &str, key: &str, x: f64, y: f64| DeltaRow {
        scope: scope.into(),
        key: key.into(),
        a: x,
        b: y,
        delta: round6(x - y),
    };
    let mut rows = vec![row("overall", "overall", a.recall, b.recall)];
    for (scope, left, right) in [
        ("category", &a.per_category, &b.per_category),
        ("group", &a.per_group, &b.per_group),
    ] {
        for (k, x) in left {
            if let Some(y) = right.get(k) {
                rows.push(row(scope, k, x.recall, y.recall));
            }
        }
    }
    Ok(DeltaTable {
        a: a.label.clone(),
        b: b.label.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub fixed_prompt_tokens: usize,
    pub image_multiplicity: usize,
    pub recall: f64,
}

impl CostRow {
    pub fn total_tokens(&self, image_tokens: usize) -> usize {
        self.fixed_prompt_tokens + self.image_multiplicity * image_tokens
    }

    pub fn budget_label(&self) -> String {
        match self.image_multiplicity {
            1 => format!("{}+I", group_thousands(self.fixed_prompt_tokens)),
            k => format!("{}+{k}I", group_thousands(self.fixed_prompt_tokens)),
        }
    }
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Rows sorted by recall descending, ties by ascending fixed prompt cost,
/// then label.
pub fn cost_performance_table(reports: &[EvalReport]) -> Result<Vec<CostRow>, EvalError> {
    let mut rows = reports
        .iter()
        .map(|r| {
            let b = r.budget.ok_or_else(|| EvalError::MissingBudget(r.label.clone()))?;
            Ok(CostRow {
                label: r.label.clone(),
                fixed_prompt_tokens: b.fixed_prompt_tokens,
                image_multiplicity: b.image_multiplicity,
                recall: r.recall,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    rows.sort_by(|a, b| {
        b.recall
            .total_cmp(&a.recall)
            .then(a.fixed_prompt_tokens.cmp(&b.fixed_prompt_tokens))
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(rows)
}

pub fn cost_table_text(rows: &[CostRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<width$}  {:>14}  {:>6}\n", "Strategy", "P + kI", "Recall");
    for r in rows {
        s.push_str(&format!("{:<width$}  {:>14}  {:>6.2}\n", r.label, r.budget_label(), r.recall));
    }
    s
}

pub fn cost_table_csv(rows: &[CostRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "fixed_prompt_tokens", "image_multiplicity", "recall"])
        .expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.fixed_prompt_tokens.to_string(),
            r.image_multiplicity.to_string(),
            fmt_rate(r.recall),
        ])
        .expect("in-memory csv");
    }
    finish(w)
}

/// Plot points `(total tokens at image cost I, recall)`.
pub fn cost_plot_csv(rows: &[CostRow], image_tokens: usize) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "image_tokens", "total_tokens", "recall"])
        .expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.label.clone(),
            image_tokens.to_string(),
            r.total_tokens(image_tokens).to_string(),
            fmt_rate(r.recall),
        ])
        .expect("in-memory csv");
    }
    finish(w)
}

fn category_short(c: Category) -> &'static str {
    match c {
        Category::TriggerConditions => "Triggers",
        other => other.as_str(),
    }
}

/// Overall and per-category recall per report, categories in name order.
pub fn category_table_csv(reports: &[EvalReport]) -> String {
    let mut cats = Category::ALL;
    cats.sort_by_key(|c| c.as_str());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "Overall".to_string()];
    header.extend(cats.iter().map(|c| category_short(*c).to_string()));
    w.write_record(&header).expect("in-memory csv");
    for r in reports {
        let mut rec = vec![r.label.clone(), fmt_rate(r.recall)];
        rec.extend(cats.iter().map(|c| {
            r.per_category
                .get(c.as_str())
                .map_or_else(String::new, |g| fmt_rate(g.recall))
        }));
        w.write_record(&rec).expect("in-memory csv");
    }
    finish(w)
}

pub fn category_table_text(reports: &[EvalReport]) -> String {
    let mut cats = Category::ALL;
    cats.sort_by_key(|c| c.as_str());
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}  {:>8}", "Model", "Overall");
    for c in cats {
        s.push_str(&format!("  {:>9}", category_short(c)));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{:<width$}  {:>8.2}", r.label, r.recall));
        for c in cats {
            match r.per_category.get(c.as_str()) {
                Some(g) => s.push_str(&format!("  {:>9.2}", g.recall)),
                None => s.push_str(&format!("  {:>9}", "-")),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    /// Recomputed from precision and recall.
    pub f1: f64,
    /// F1 as stored in the report.
    pub stored_f1: f64,
    pub avg_l2: f64,
}

/// Precision, recall, recomputed F1 and average L2 for reports with
/// detection metrics.
pub fn detection_table(reports: &[EvalReport]) -> Vec<DetectionRow> {
    reports
        .iter()
        .filter_map(|r| {
            r.detection.map(|d| DetectionRow {
                label: r.label.clone(),
                precision: d.precision,
                recall: d.recall,
                f1: f1_score(d.precision, d.recall),
                stored_f1: d.f1,
                avg_l2: d.avg_l2,
            })
        })
        .collect()
}

pub fn detection_table_text(rows: &[DetectionRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<width$}  {:>9}  {:>6}  {:>6}  {:>6}\n",
        "Model", "Precision", "Recall", "F1", "avgL2"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>9.3}  {:>6.3}  {:>6.3}  {:>6.3}\n",
            r.label, r.precision, r.recall, r.f1, r.avg_l2
        ));
    }
    s
}

pub fn detection_table_csv(rows: &[DetectionRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "precision", "recall", "f1", "stored_f1", "avg_l2"])
        .expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.label.clone(),
            fmt_rate(r.precision),
            fmt_rate(r.recall),
            fmt_rate(r.f1),
            fmt_rate(r.stored_f1),
            fmt_rate(r.avg_l2),
        ])
        .expect("in-memory csv");
    }
    finish(w)
}
