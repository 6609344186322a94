//! Stratified batch sampling with an exact per-batch class composition.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::manifest::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::style_mix::DomainBatchMeta;

/// Samples per stratum; domain 0 is real.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composition {
    pub counts: BTreeMap<u32, usize>,
}

impl Composition {
    pub fn new(counts: impl IntoIterator<Item = (u32, usize)>) -> Self {
        Composition { counts: counts.into_iter().filter(|(_, n)| *n > 0).collect() }
    }

    /// `round(batch * real_fraction)` reals; the fakes are spread evenly over
    /// `domains`, earlier domains taking the remainder.
    pub fn balanced(batch_size: usize, real_fraction: f64, domains: &[u32]) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Composition("no forgery domains requested".into()));
        }
        let real = ((batch_size as f64 * real_fraction).round() as usize).clamp(1, batch_size.saturating_sub(1));
        let fake = batch_size - real;
        if fake == 0 {
            return Err(Error::Composition(format!("batch size {batch_size} leaves no room for fakes")));
        }
        let mut counts = vec![(0u32, real)];
        for (i, &d) in domains.iter().enumerate() {
            counts.push((d, fake / domains.len() + usize::from(i < fake % domains.len())));
        }
        Ok(Composition::new(counts))
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Images plus labels and domain ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub meta: DomainBatchMeta,
    /// Rows of the source dataset, in batch order.
    pub indices: Vec<usize>,
}

/// Stratum pools of a dataset, built once.
#[derive(Debug, Clone)]
pub struct Sampler {
    pools: BTreeMap<u32, Vec<usize>>,
    composition: Composition,
}

impl Sampler {
    pub fn new(dataset: &Dataset, composition: Composition) -> Result<Self> {
        let mut pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in dataset.entries.iter().enumerate() {
            pools.entry(e.domain).or_default().push(i);
        }
        for (&d, &n) in &composition.counts {
            if n > 0 && pools.get(&d).is_none_or(Vec::is_empty) {
                let what = if d == 0 { "real images".to_string() } else { format!("forgery domain {d}") };
                return Err(Error::Composition(format!("dataset has no {what}")));
            }
        }
        pools.retain(|d, _| composition.counts.contains_key(d));
        Ok(Sampler { pools, composition })
    }

    pub fn composition(&self) -> &Composition {
        &self.composition
    }

    /// Draws each stratum i.i.d. with replacement, then shuffles batch order.
    pub fn sample_indices(&self, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.composition.total());
        for (d, &n) in &self.composition.counts {
            let pool = &self.pools[d];
            out.extend((0..n).map(|_| pool[rng.random_range(0..pool.len())]));
        }
        out.shuffle(rng);
        out
    }

    pub fn sample_batch(&self, dataset: &Dataset, rng: &mut Rng) -> Result<Batch> {
        let indices = self.sample_indices(rng);
        batch_from_indices(dataset, indices)
    }
}

pub fn batch_from_indices(dataset: &Dataset, indices: Vec<usize>) -> Result<Batch> {
    let images = dataset.tensor(&indices)?;
    let domains = indices.iter().map(|&i| dataset.entries[i].domain).collect();
    Ok(Batch { images, meta: DomainBatchMeta::from_domains(domains), indices })
}

/// One-shot convenience around [`Sampler`].
pub fn sample_batch(dataset: &Dataset, composition: &Composition, rng: &mut Rng) -> Result<Batch> {
    Sampler::new(dataset, composition.clone())?.sample_batch(dataset, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_split_of_sixteen() {
        let c = Composition::balanced(16, 0.5, &[1, 2, 3]).unwrap();
        assert_eq!(c.counts.get(&0), Some(&8));
        assert_eq!(c.counts.get(&1), Some(&3));
        assert_eq!(c.counts.get(&2), Some(&3));
        assert_eq!(c.counts.get(&3), Some(&2));
        assert_eq!(c.total(), 16);
    }
}
