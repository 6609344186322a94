//! Scoring and the cross-domain evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{compute_metrics, Level, Metrics, ScoreSet};
use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig};
use crate::numerics::ParamSet;
use crate::pipeline::{images_to_tensor, Checkpoint, Dataset, Manifest, Split};

/// Fake probabilities for `images`, scored in parallel chunks of `batch`.
/// Chunks are independent, so the result does not depend on thread count.
pub fn score_images(params: &ParamSet, model: &ModelConfig, images: &[RgbImage], batch: usize) -> Result<Vec<f64>> {
    let size = model.backbone.image_size;
    let chunks: Vec<Vec<f64>> = images
        .par_chunks(batch.max(1))
        .map(|chunk| predict(params, model, &images_to_tensor(chunk.iter(), size)?))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn score_dataset(params: &ParamSet, model: &ModelConfig, dataset: &Dataset, batch: usize) -> Result<Vec<f64>> {
    score_images(params, model, &dataset.images, batch)
}

/// Source domains the model was trained on and the held-out targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalProtocol {
    pub train_domains: BTreeSet<u32>,
    pub target_domains: BTreeSet<u32>,
    /// ACC threshold on the fake probability.
    pub threshold: f64,
}

impl EvalProtocol {
    pub fn new(train_domains: impl IntoIterator<Item = u32>, target_domains: impl IntoIterator<Item = u32>, threshold: f64) -> Result<Self> {
        let train_domains: BTreeSet<u32> = train_domains.into_iter().collect();
        let target_domains: BTreeSet<u32> = target_domains.into_iter().collect();
        if target_domains.is_empty() {
            return Err(Error::ProtocolViolation("no target domains given".into()));
        }
        if target_domains.contains(&0) {
            return Err(Error::ProtocolViolation("domain 0 is real and cannot be a forgery target".into()));
        }
        let overlap: Vec<u32> = train_domains.intersection(&target_domains).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::ProtocolViolation(format!("target domains {overlap:?} were seen during training")));
        }
        Ok(EvalProtocol { train_domains, target_domains, threshold })
    }

    /// Protocol for a checkpoint, taking the training domains from its metadata.
    pub fn for_checkpoint(ckpt: &Checkpoint, target_domains: impl IntoIterator<Item = u32>, threshold: f64) -> Result<Self> {
        EvalProtocol::new(ckpt.train_domains.iter().copied(), target_domains, threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainReport {
    pub domain: u32,
    pub image: Metrics,
    pub video: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MacroMetrics {
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
}

impl MacroMetrics {
    fn average<'a>(metrics: impl Iterator<Item = &'a Metrics>) -> MacroMetrics {
        let all: Vec<&Metrics> = metrics.collect();
        let n = all.len().max(1) as f64;
        MacroMetrics {
            acc: all.iter().map(|m| m.acc).sum::<f64>() / n,
            auc: all.iter().map(|m| m.auc).sum::<f64>() / n,
            eer: all.iter().map(|m| m.eer).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainEvalReport {
    pub train_domains: Vec<u32>,
    pub eval_domains: Vec<u32>,
    pub split: Split,
    pub threshold: f64,
    pub per_domain: Vec<DomainReport>,
    pub macro_image: MacroMetrics,
    pub macro_video: MacroMetrics,
}

impl DomainEvalReport {
    /// Flat `domain,level,metric,value` rows, `macro` for the averages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,level,metric,value\n");
        let mut row = |domain: &str, level: &str, metric: &str, value: f64| {
            out.push_str(&format!("{domain},{level},{metric},{value}\n"));
        };
        for d in &self.per_domain {
            for (level, m) in [("image", &d.image), ("video", &d.video)] {
                row(&d.domain.to_string(), level, "acc", m.acc);
                row(&d.domain.to_string(), level, "auc", m.auc);
                row(&d.domain.to_string(), level, "eer", m.eer);
            }
        }
        for (level, m) in [("image", &self.macro_image), ("video", &self.macro_video)] {
            row("macro", level, "acc", m.acc);
            row("macro", level, "auc", m.auc);
            row("macro", level, "eer", m.eer);
        }
        out
    }
}

fn reports_from_scores(
    entries: &[(u32, String, f64)],
    domains: &BTreeSet<u32>,
    threshold: f64,
) -> Result<Vec<DomainReport>> {
    let mut out = Vec::new();
    for &domain in domains {
        let rows: Vec<&(u32, String, f64)> = entries.iter().filter(|(d, _, _)| *d == 0 || *d == domain).collect();
        let set = ScoreSet::with_groups(
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.0 != 0).collect(),
            Some(rows.iter().map(|r| r.1.clone()).collect()),
        )?;
        let image = compute_metrics(&set, Level::Image, threshold)
            .map_err(|e| Error::SingleClass(format!("domain {domain}: {e}")))?;
        let video = compute_metrics(&set, Level::Video, threshold)?;
        out.push(DomainReport { domain, image, video });
    }
    Ok(out)
}

fn group_of(entry: &crate::pipeline::ManifestEntry, row: usize) -> String {
    entry.group.clone().unwrap_or_else(|| format!("#{row}"))
}

/// Per-domain metrics on `split`: each domain's fakes against all reals of
/// the split. Does not check the protocol.
pub fn evaluate_domains(
    params: &ParamSet,
    model: &ModelConfig,
    dataset: &Dataset,
    split: Split,
    domains: &BTreeSet<u32>,
    threshold: f64,
    batch: usize,
) -> Result<DomainEvalReport> {
    let subset = dataset.subset(|e| e.split == split && (e.domain == 0 || domains.contains(&e.domain)));
    let scores = score_dataset(params, model, &subset, batch)?;
    let entries: Vec<(u32, String, f64)> = subset
        .entries
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (e, s))| (e.domain, group_of(e, i), s))
        .collect();
    let per_domain = reports_from_scores(&entries, domains, threshold)?;
    Ok(DomainEvalReport {
        train_domains: Vec::new(),
        eval_domains: domains.iter().copied().collect(),
        split,
        threshold,
        macro_image: MacroMetrics::average(per_domain.iter().map(|d| &d.image)),
        macro_video: MacroMetrics::average(per_domain.iter().map(|d| &d.video)),
        per_domain,
    })
}

/// Scores every test-split sample of the target domains (plus the test
/// reals) in inference mode and reports per-domain and macro metrics.
pub fn cross_domain_eval(ckpt: &Checkpoint, dataset: &Dataset, protocol: &EvalProtocol) -> Result<DomainEvalReport> {
    let declared: BTreeSet<u32> = ckpt.train_domains.iter().copied().collect();
    if !declared.is_subset(&protocol.train_domains) || declared.intersection(&protocol.target_domains).next().is_some() {
        return Err(Error::ProtocolViolation(format!(
            "checkpoint was trained on {:?}, which overlaps targets {:?}",
            ckpt.train_domains, protocol.target_domains
        )));
    }
    let model = &ckpt.config.model;
    ckpt.check_model(model)?;
    let mut report = evaluate_domains(
        &ckpt.params,
        model,
        dataset,
        Split::Test,
        &protocol.target_domains,
        protocol.threshold,
        ckpt.config.eval.batch_size,
    )?;
    report.train_domains = ckpt.train_domains.clone();
    Ok(report)
}

/// Reads a `path,score` CSV.
pub fn read_scores(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = BTreeMap::new();
    for (i, row) in reader.deserialize::<(String, f64)>().enumerate() {
        let (path, score) = row.map_err(|e| Error::Manifest { line: i + 2, detail: e.to_string() })?;
        if !score.is_finite() {
            return Err(Error::NonFinite { op: format!("score for {path}") });
        }
        out.insert(path, score);
    }
    Ok(out)
}

/// Metrics for externally produced scores, joined to `manifest` by path.
pub fn evaluate_scores(manifest: &Manifest, scores: &BTreeMap<String, f64>, protocol: &EvalProtocol) -> Result<DomainEvalReport> {
    let mut entries = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split != Split::Test || !(e.domain == 0 || protocol.target_domains.contains(&e.domain)) {
            continue;
        }
        let score = *scores
            .get(&e.path)
            .ok_or_else(|| Error::InvalidConfig(format!("no score for `{}`", e.path)))?;
        entries.push((e.domain, group_of(e, i), score));
    }
    let per_domain = reports_from_scores(&entries, &protocol.target_domains, protocol.threshold)?;
    Ok(DomainEvalReport {
        train_domains: protocol.train_domains.iter().copied().collect(),
        eval_domains: protocol.target_domains.iter().copied().collect(),
        split: Split::Test,
        threshold: protocol.threshold,
        macro_image: MacroMetrics::average(per_domain.iter().map(|d| &d.image)),
        macro_video: MacroMetrics::average(per_domain.iter().map(|d| &d.video)),
        per_domain,
    })
}
