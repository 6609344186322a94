//! AUC under each perturbation kind and severity.

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{auc, ScoreSet};
use super::perturb::{perturb, PerturbKind, PerturbationSpec};
use super::protocol::{score_images, EvalProtocol};
use crate::error::{Error, Result};
use crate::pipeline::{Checkpoint, Dataset, Split};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub kinds: Vec<PerturbKind>,
    pub severities: Vec<u8>,
    /// `auc[kind][severity]`.
    pub auc: Vec<Vec<f64>>,
    pub n_real: usize,
    pub n_fake: usize,
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,severity,auc\n");
        for (kind, row) in self.kinds.iter().zip(&self.auc) {
            for (s, v) in self.severities.iter().zip(row) {
                out.push_str(&format!("{kind},{s},{v}\n"));
            }
        }
        out
    }
}

/// Per-image seed so every image gets its own noise draw.
fn image_seed(seed: u64, row: usize) -> u64 {
    seed ^ (row as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Scores the test-split reals and target-domain fakes under every
/// `(kind, severity)`; severity 0 is the clean set, scored once.
pub fn robustness_eval(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    protocol: &EvalProtocol,
    kinds: &[PerturbKind],
    severities: &[u8],
    seed: u64,
) -> Result<RobustnessReport> {
    if ckpt.train_domains.iter().any(|d| protocol.target_domains.contains(d)) {
        return Err(Error::ProtocolViolation(format!(
            "checkpoint was trained on {:?}, which overlaps targets {:?}",
            ckpt.train_domains, protocol.target_domains
        )));
    }
    let model = &ckpt.config.model;
    ckpt.check_model(model)?;
    let subset = dataset.subset(|e| e.split == Split::Test && (e.domain == 0 || protocol.target_domains.contains(&e.domain)));
    let labels: Vec<bool> = subset.entries.iter().map(|e| e.domain != 0).collect();
    let batch = ckpt.config.eval.batch_size;

    let score = |images: &[RgbImage]| -> Result<f64> {
        let scores = score_images(&ckpt.params, model, images, batch)?;
        auc(&ScoreSet::new(scores, labels.clone())?)
    };
    let clean = if severities.contains(&0) { Some(score(&subset.images)?) } else { None };

    let mut table = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut row = Vec::with_capacity(severities.len());
        for &severity in severities {
            if severity == 0 {
                row.push(clean.expect("computed above"));
                continue;
            }
            let images: Vec<RgbImage> = subset
                .images
                .par_iter()
                .enumerate()
                .map(|(i, img)| perturb(img, &PerturbationSpec::new(kind, severity, image_seed(seed, i))?))
                .collect::<Result<_>>()?;
            row.push(score(&images)?);
        }
        table.push(row);
    }
    Ok(RobustnessReport {
        kinds: kinds.to_vec(),
        severities: severities.to_vec(),
        auc: table,
        n_real: labels.iter().filter(|l| !**l).count(),
        n_fake: labels.iter().filter(|l| **l).count(),
    })
}
