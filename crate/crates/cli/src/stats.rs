//! Ablation table aggregation.

use serde::{Deserialize, Serialize};

use semspeech::fusion::Variant;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for a single run.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
}

impl AblationRow {
    pub fn new(variant: Variant, metric: &str, seeds: Vec<u64>, values: Vec<f64>) -> Self {
        Self { variant, metric: metric.to_string(), mean: mean(&values), std: sample_std(&values), seeds, values }
    }
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,metric,mean,std,n,values\n");
    for r in rows {
        let values: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{},{},{},{},{}\n", r.variant, r.metric, r.mean, r.std, r.values.len(), values.join(";")));
    }
    out
}

/// Row lookup helper.
pub fn find<'a>(rows: &'a [AblationRow], variant: Variant, metric: &str) -> Option<&'a AblationRow> {
    rows.iter().find(|r| r.variant == variant && r.metric == metric)
}
