//! Forgery style mixture: fake token features take on channel statistics
//! blended with those of a fake feature from a different forgery domain.
//!
//! Statistics are per sample and channel over the patch tokens. The CLS token
//! is left out of the statistics but is re-styled together with the patches.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::Rng;
use crate::Mode;

/// Labels are `false` for real and `true` for fake; real samples carry domain 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBatchMeta {
    pub labels: Vec<bool>,
    pub domains: Vec<u32>,
    pub original_index: Vec<usize>,
}

impl DomainBatchMeta {
    pub fn new(labels: Vec<bool>, domains: Vec<u32>) -> Result<Self> {
        if labels.len() != domains.len() {
            return Err(Error::shape("batch meta", format!("{} labels vs {} domains", labels.len(), domains.len())));
        }
        for (i, (&fake, &d)) in labels.iter().zip(&domains).enumerate() {
            if fake == (d == 0) {
                return Err(Error::InvalidConfig(format!(
                    "sample {i}: label {} with domain {d}",
                    if fake { "fake" } else { "real" }
                )));
            }
        }
        let original_index = (0..labels.len()).collect();
        Ok(DomainBatchMeta { labels, domains, original_index })
    }

    /// Derives labels from domain ids (0 is real).
    pub fn from_domains(domains: Vec<u32>) -> Self {
        let labels = domains.iter().map(|&d| d != 0).collect();
        let original_index = (0..domains.len()).collect();
        DomainBatchMeta { labels, domains, original_index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_values(&self) -> Vec<f64> {
        self.labels.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()
    }

    pub fn fake_count(&self) -> usize {
        self.labels.iter().filter(|&&f| f).count()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        DomainBatchMeta {
            labels: perm.iter().map(|&i| self.labels[i]).collect(),
            domains: perm.iter().map(|&i| self.domains[i]).collect(),
            original_index: perm.iter().map(|&i| self.original_index[i]).collect(),
        }
    }
}

/// Per-sample, per-channel mean and floored standard deviation, `[batch, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixConfig {
    pub enabled: bool,
    /// Per-batch activation probability.
    pub probability: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Fraction of fake samples restyled when the mixture fires.
    pub ratio: f64,
    /// Floor on the standard deviation.
    pub eps: f64,
    /// Leading tokens excluded from statistics (the CLS token).
    pub skip_tokens: usize,
    /// Replaces the Beta draw with a constant blend weight.
    pub fixed_delta: Option<f64>,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            enabled: true,
            probability: 0.5,
            alpha: 0.1,
            beta: 0.1,
            ratio: 0.5,
            eps: 1e-6,
            skip_tokens: 1,
            fixed_delta: None,
        }
    }
}

impl MixConfig {
    pub fn disabled() -> Self {
        MixConfig { enabled: false, ..MixConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("mix.{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("probability", self.probability)?;
        unit("ratio", self.ratio)?;
        if let Some(d) = self.fixed_delta {
            unit("fixed_delta", d)?;
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("mix.alpha and mix.beta must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig("mix.eps must be positive".into()));
        }
        Ok(())
    }
}

/// What the mixture did to one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixOutcome {
    pub active: bool,
    /// `(sample, partner)` pairs in original batch indices.
    pub pairs: Vec<(usize, usize)>,
    pub deltas: Vec<f64>,
}

impl MixOutcome {
    pub fn inactive() -> Self {
        MixOutcome::default()
    }
}

/// Stable order: real first, then ascending domain id. Returns the sorted
/// features, the sorted meta and `perm` with `sorted[i] = input[perm[i]]`.
pub fn sort_by_domain(features: &Tensor, meta: &DomainBatchMeta) -> Result<(Tensor, DomainBatchMeta, Vec<usize>)> {
    let batch = features.shape().first().copied().unwrap_or(0);
    if batch != meta.len() {
        return Err(Error::shape("sort_by_domain", format!("{batch} rows vs {} meta entries", meta.len())));
    }
    let perm = domain_order(&meta.domains);
    let row = features.numel() / batch.max(1);
    let mut data = Vec::with_capacity(features.numel());
    for &i in &perm {
        data.extend_from_slice(&features.data()[i * row..(i + 1) * row]);
    }
    Ok((Tensor::new(features.shape().to_vec(), data)?, meta.permuted(&perm), perm))
}

fn domain_order(domains: &[u32]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..domains.len()).collect();
    perm.sort_by_key(|&i| domains[i]);
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const DERANGEMENT_ATTEMPTS: usize = 256;

/// Partner assignment `a` (a permutation of `0..domains.len()`) with
/// `domains[a[i]] != domains[i]` for every `i`.
pub fn domain_deranged_shuffle(domains: &[u32], rng: &mut Rng) -> Result<Vec<usize>> {
    let n = domains.len();
    let mut counts = std::collections::BTreeMap::new();
    for &d in domains {
        *counts.entry(d).or_insert(0usize) += 1;
    }
    let largest = counts.values().copied().max().unwrap_or(0);
    if n == 0 || 2 * largest > n {
        return Err(Error::NoValidDerangement(domains.to_vec()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..DERANGEMENT_ATTEMPTS {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| domains[i] != domains[p]) {
            return Ok(perm);
        }
    }
    // Shuffle within each domain, group by domain and shift by the largest
    // group size: no index can land in its own group.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| domains[i]);
    let mut assignment = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        assignment[i] = order[(k + largest) % n];
    }
    Ok(assignment)
}

/// Tensor-level statistics of `features: [B, T, d]` over tokens `skip..T`.
pub fn channel_stats(features: &Tensor, skip: usize, eps: f64) -> Result<StyleStats> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let (mu, sigma) = channel_stats_var(&mut g, x, skip, eps)?;
    let batch = features.shape()[0];
    let d = features.shape()[2];
    Ok(StyleStats {
        mu: g.value(mu).reshape(&[batch, d])?,
        sigma: g.value(sigma).reshape(&[batch, d])?,
    })
}

/// Graph statistics over tokens `skip..T`, each shaped `[B, 1, d]`.
pub fn channel_stats_var(g: &mut Graph, features: Var, skip: usize, eps: f64) -> Result<(Var, Var)> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 3 || shape[1] <= skip {
        return Err(Error::shape("channel_stats", format!("{shape:?} with {skip} skipped tokens")));
    }
    let body = if skip == 0 { features } else { g.narrow(features, 1, skip, shape[1] - skip)? };
    let mu = g.mean_axis(body, 1, true)?;
    let centered = g.sub(body, mu)?;
    let sq = g.square(centered)?;
    let var = g.mean_axis(sq, 1, true)?;
    let var = g.clamp_min(var, eps * eps)?;
    let sigma = g.sqrt(var)?;
    Ok((mu, sigma))
}

/// `γ_mix · (f − μ(f)) / σ(f) + η_mix` with `γ_mix = δσ(f) + (1−δ)σ(f̃)` and
/// `η_mix = δμ(f) + (1−δ)μ(f̃)`, one `δ` per sample.
pub fn mix_styles(g: &mut Graph, f: Var, f_tilde: Var, delta: &[f64], config: &MixConfig) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape != g.shape(f_tilde) {
        return Err(Error::shape("mix_styles", format!("{shape:?} vs {:?}", g.shape(f_tilde))));
    }
    if delta.len() != shape[0] {
        return Err(Error::shape("mix_styles", format!("{} deltas for {} samples", delta.len(), shape[0])));
    }
    let (mu, sigma) = channel_stats_var(g, f, config.skip_tokens, config.eps)?;
    let (mu_t, sigma_t) = channel_stats_var(g, f_tilde, config.skip_tokens, config.eps)?;
    let d = g.constant(Tensor::new(vec![shape[0], 1, 1], delta.to_vec())?);
    let one_minus = g.constant(Tensor::new(vec![shape[0], 1, 1], delta.iter().map(|v| 1.0 - v).collect())?);

    let a = g.mul(d, sigma)?;
    let b = g.mul(one_minus, sigma_t)?;
    let gamma = g.add(a, b)?;
    let a = g.mul(d, mu)?;
    let b = g.mul(one_minus, mu_t)?;
    let eta = g.add(a, b)?;

    let centered = g.sub(f, mu)?;
    let normed = g.div(centered, sigma)?;
    let scaled = g.mul(normed, gamma)?;
    g.add(scaled, eta)
}

/// Applies the mixture to `features: [B, T, d]`. Returns the input node
/// unchanged in inference mode, when the coin says no, or when no valid
/// partner assignment exists.
pub fn forgery_style_mixture(
    g: &mut Graph,
    features: Var,
    meta: &DomainBatchMeta,
    rng: &mut Rng,
    mode: Mode,
    config: &MixConfig,
) -> Result<(Var, MixOutcome)> {
    let batch = g.shape(features).first().copied().unwrap_or(0);
    if batch != meta.len() {
        return Err(Error::shape("forgery_style_mixture", format!("{batch} rows vs {} meta entries", meta.len())));
    }
    if mode == Mode::Infer || !config.enabled {
        return Ok((features, MixOutcome::inactive()));
    }
    if !rng.random_bool(config.probability) {
        return Ok((features, MixOutcome::inactive()));
    }

    let perm = domain_order(&meta.domains);
    let fakes: Vec<usize> = perm.iter().copied().filter(|&i| meta.labels[i]).collect();
    if fakes.is_empty() {
        return Ok((features, MixOutcome::inactive()));
    }
    let fake_domains: Vec<u32> = fakes.iter().map(|&i| meta.domains[i]).collect();
    let assignment = match domain_deranged_shuffle(&fake_domains, rng) {
        Ok(a) => a,
        Err(e) => {
            debug!("style mixture bypassed: {e}");
            return Ok((features, MixOutcome::inactive()));
        }
    };

    let take = (config.ratio * fakes.len() as f64).round() as usize;
    let mut chosen: Vec<usize> = (0..fakes.len()).collect();
    chosen.shuffle(rng);
    chosen.truncate(take);
    chosen.sort_unstable();
    if chosen.is_empty() {
        return Ok((features, MixOutcome { active: true, ..MixOutcome::default() }));
    }

    let deltas: Vec<f64> = match config.fixed_delta {
        Some(d) => vec![d; chosen.len()],
        None => {
            let beta = Beta::new(config.alpha, config.beta).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            chosen.iter().map(|_| beta.sample(rng)).collect()
        }
    };
    let pairs: Vec<(usize, usize)> = chosen.iter().map(|&k| (fakes[k], fakes[assignment[k]])).collect();
    let own: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let partners: Vec<usize> = pairs.iter().map(|p| p.1).collect();

    let f = g.index_select(features, 0, &own)?;
    let partner = g.index_select(features, 0, &partners)?;
    let f_tilde = g.detach(partner);
    let mixed = mix_styles(g, f, f_tilde, &deltas, config)?;

    let mut source: Vec<usize> = (0..batch).collect();
    for (k, &i) in own.iter().enumerate() {
        source[i] = batch + k;
    }
    let stacked = g.concat(&[features, mixed], 0)?;
    let out = g.index_select(stacked, 0, &source)?;
    Ok((out, MixOutcome { active: true, pairs, deltas }))
}
