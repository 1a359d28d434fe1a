//! Weighted interleaving of several sample sources.
//!
//! At every step a source is drawn from the categorical distribution of the
//! normalized weights of the sources that are still live. The generator state
//! and the live set are all the mixer needs to resume.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::SplitMix64;

/// What to do when a source runs dry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exhausted {
    /// Remove the source; mixing ends when every source is gone.
    #[default]
    Drop,
    /// Restart the source from its beginning.
    Cycle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    weights: Vec<f64>,
    live: Vec<bool>,
    rng: SplitMix64,
}

impl Mixer {
    pub fn new(weights: &[f64], rng: SplitMix64) -> Result<Self> {
        if weights.is_empty() {
            bail!(Input, "mixing needs at least one source");
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            bail!(Input, "mixing weights must be positive and finite, got {:?}", weights);
        }
        Ok(Self {
            weights: weights.to_vec(),
            live: alloc::vec![true; weights.len()],
            rng,
        })
    }

    /// Restores a mixer from its live set and generator.
    pub fn restore(weights: &[f64], live: Vec<bool>, rng: SplitMix64) -> Result<Self> {
        let mut m = Self::new(weights, rng)?;
        if live.len() != weights.len() {
            bail!(
                Validation,
                "live set has {} entries for {} sources",
                live.len(),
                weights.len()
            );
        }
        m.live = live;
        Ok(m)
    }

    pub fn rng(&self) -> SplitMix64 {
        self.rng
    }

    pub fn live(&self) -> &[bool] {
        &self.live
    }

    pub fn retire(&mut self, source: usize) {
        self.live[source] = false;
    }

    /// Draws the next source, or `None` once every source is retired.
    pub fn choose(&mut self) -> Option<usize> {
        let total: f64 = self
            .weights
            .iter()
            .zip(&self.live)
            .filter(|(_, l)| **l)
            .map(|(w, _)| w)
            .sum();
        if total == 0.0 {
            return None;
        }
        let u = self.rng.next_f64() * total;
        let mut acc = 0.0;
        let mut last = None;
        for (i, (w, l)) in self.weights.iter().zip(&self.live).enumerate() {
            if !*l {
                continue;
            }
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
        last
    }
}

/// In-memory mixing over iterators, for sources that cannot be restarted.
pub struct Mix<I> {
    sources: Vec<I>,
    mixer: Mixer,
}

impl<I: Iterator> Iterator for Mix<I> {
    type Item = I::Item;

    fn next(&mut self) -> Option<I::Item> {
        loop {
            let i = self.mixer.choose()?;
            match self.sources[i].next() {
                Some(item) => return Some(item),
                None => self.mixer.retire(i),
            }
        }
    }
}

pub fn mix<I: Iterator>(sources: Vec<I>, weights: &[f64], seed: u64) -> Result<Mix<I>> {
    if sources.len() != weights.len() {
        bail!(Input, "{} sources but {} weights", sources.len(), weights.len());
    }
    Ok(Mix {
        sources,
        mixer: Mixer::new(weights, SplitMix64::new(seed))?,
    })
}
