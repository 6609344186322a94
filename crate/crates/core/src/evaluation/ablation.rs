//! Sweep of the fraction of restyled fake samples.

use serde::Serialize;

use super::protocol::{cross_domain_eval, EvalProtocol};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{train, training_subset, Dataset};

pub const RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioPoint {
    pub ratio: f64,
    /// Macro image-level AUC over the target domains.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub train_domains: Vec<u32>,
    pub target_domains: Vec<u32>,
    pub points: Vec<RatioPoint>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,auc\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.ratio, p.auc));
        }
        out
    }
}

/// Trains one model per ratio with the mixture enabled and evaluates each on
/// `config.eval.target_domains`.
pub fn ablate_ratio(config: &Config, dataset: &Dataset, ratios: &[f64]) -> Result<AblationReport> {
    if ratios.is_empty() {
        return Err(Error::InvalidConfig("no ratios given".into()));
    }
    let protocol = EvalProtocol::new(
        config.train.domains.iter().copied(),
        config.eval.target_domains.iter().copied(),
        config.eval.threshold,
    )?;
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut cfg = config.clone();
        cfg.mix.enabled = true;
        cfg.mix.ratio = ratio;
        cfg.validate()?;
        let out = train(&cfg, &training_subset(dataset, &cfg))?;
        let report = cross_domain_eval(&out.checkpoint, dataset, &protocol)?;
        points.push(RatioPoint { ratio, auc: report.macro_image.auc });
    }
    Ok(AblationReport {
        train_domains: protocol.train_domains.iter().copied().collect(),
        target_domains: protocol.target_domains.iter().copied().collect(),
        points,
    })
}
