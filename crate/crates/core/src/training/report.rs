use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::write_atomic;
use crate::error::Result;

/// Batch-mean loss terms of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_con: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_low: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn parts(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("l_con", self.l_con),
            ("l_kl", self.l_kl),
            ("l_q", self.l_q),
            ("l_v", self.l_v),
            ("l_high", self.l_high),
            ("l_low", self.l_low),
        ]
    }

    /// Sets `total` to the sum of the present parts.
    pub fn finish(mut self) -> Self {
        self.total = self.parts().iter().filter_map(|(_, v)| *v).sum();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.parts().iter().all(|(_, v)| v.is_none_or(f64::is_finite))
    }
}

pub fn reports_to_jsonl(reports: &[LossReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

pub fn reports_to_csv(reports: &[LossReport]) -> String {
    let mut out = String::from("stage,epoch,step,l_con,l_kl,l_q,l_v,l_high,l_low,total,lr\n");
    for r in reports {
        let _ = write!(out, "{},{},{}", r.stage, r.epoch, r.step);
        for (_, v) in r.parts() {
            out.push(',');
            if let Some(v) = v {
                let _ = write!(out, "{v}");
            }
        }
        let _ = writeln!(out, ",{},{}", r.total, r.lr);
    }
    out
}

pub fn write_reports(dir: &Path, name: &str, reports: &[LossReport]) -> Result<()> {
    write_atomic(&dir.join(format!("{name}.jsonl")), reports_to_jsonl(reports).as_bytes())?;
    write_atomic(&dir.join(format!("{name}.csv")), reports_to_csv(reports).as_bytes())
}

/// Mean of one loss column over the reports of an epoch.
pub fn epoch_mean(reports: &[LossReport], epoch: usize, part: fn(&LossReport) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = reports.iter().filter(|r| r.epoch == epoch).filter_map(part).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
