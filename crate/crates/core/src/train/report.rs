use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// Held-out metrics of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub seed: u64,
    pub fingerprint: u64,
    /// Corpus name → mean MLM loss.
    pub mlm_loss: BTreeMap<String, f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    pub dev_macro_f1: Option<f64>,
    pub steps: usize,
}

impl EvalReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// `key=value` pairs, one line per record.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        if !self.label.is_empty() {
            put("label", self.label.clone());
        }
        put("seed", self.seed.to_string());
        put("fingerprint", format!("{:016x}", self.fingerprint));
        put("steps", self.steps.to_string());
        for (corpus, loss) in &self.mlm_loss {
            put(&format!("mlm_loss.{corpus}"), format!("{loss:.12}"));
        }
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("macro_f1", self.macro_f1),
            ("micro_f1", self.micro_f1),
            ("dev_macro_f1", self.dev_macro_f1),
        ] {
            if let Some(v) = v {
                put(k, format!("{v:.6}"));
            }
        }
        out
    }

    pub fn csv_header() -> &'static str {
        "label,seed,fingerprint,steps,accuracy,macro_f1,micro_f1,dev_macro_f1"
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:016x},{},{},{},{},{}",
            self.label,
            self.seed,
            self.fingerprint,
            self.steps,
            f(self.accuracy),
            f(self.macro_f1),
            f(self.micro_f1),
            f(self.dev_macro_f1)
        )
    }
}

/// Reports of one configuration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub reports: Vec<EvalReport>,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

impl SeedSummary {
    pub fn from_reports(reports: Vec<EvalReport>) -> Self {
        let f1: Vec<f64> = reports.iter().filter_map(|r| r.macro_f1).collect();
        let (mean, std) = super::metrics::mean_std(&f1);
        SeedSummary {
            reports,
            mean_macro_f1: mean,
            std_macro_f1: std,
        }
    }

    /// `mean±std` in percent, one decimal.
    pub fn display(&self) -> String {
        format!("{:.1}±{:.1}", 100.0 * self.mean_macro_f1, 100.0 * self.std_macro_f1)
    }
}
