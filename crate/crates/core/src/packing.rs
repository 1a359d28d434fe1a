//! Greedy sample packing under a token and an image-tile budget.
//!
//! Samples are appended in arrival order while both budgets hold; the first
//! sample that does not fit closes the current pack and opens the next. Each
//! pack is padded to the full context and carries per-position segment ids
//! (`1..=k` for samples, `0` for padding) from which the block-diagonal
//! visibility mask is derived.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Segment id of padding positions.
pub const PAD_SEGMENT: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackConfig {
    pub context: usize,
    pub max_tiles: u32,
    pub pad_id: u32,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self {
            context: 4096,
            max_tiles: 108,
            pad_id: 0,
        }
    }
}

impl PackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 {
            bail!(Config, "context length must be positive");
        }
        Ok(())
    }
}

/// One training sample as seen by the packer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackSample {
    pub key: String,
    pub tokens: Vec<u32>,
    pub tiles: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    pub tiles: u32,
    pub keys: Vec<String>,
}

impl PackedBatch {
    /// Whether position `i` may attend to position `j`.
    pub fn visible(&self, i: usize, j: usize) -> bool {
        let s = self.segments[i];
        s != PAD_SEGMENT && s == self.segments[j]
    }

    /// Row-major `context × context` boolean mask.
    pub fn dense_mask(&self) -> Vec<bool> {
        let n = self.segments.len();
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                m.push(self.visible(i, j));
            }
        }
        m
    }

    /// Non-padding positions.
    pub fn used(&self) -> usize {
        self.segments.iter().filter(|&&s| s != PAD_SEGMENT).count()
    }

    pub fn padding(&self) -> usize {
        self.segments.len() - self.used()
    }

    pub fn samples(&self) -> usize {
        self.keys.len()
    }
}

/// Incremental packer; holds the samples of the pack being filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packer {
    cfg: PackConfig,
    pending: Vec<PackSample>,
    tokens: usize,
    tiles: u32,
}

impl Packer {
    pub fn new(cfg: PackConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            pending: Vec::new(),
            tokens: 0,
            tiles: 0,
        })
    }

    /// Restores a packer whose open pack holds `pending`.
    pub fn with_pending(cfg: PackConfig, pending: Vec<PackSample>) -> Result<Self> {
        let mut p = Self::new(cfg)?;
        for s in pending {
            p.check(&s)?;
            if p.fits(&s) {
                p.add(s);
            } else {
                bail!(Validation, "pending samples exceed the pack budget");
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &PackConfig {
        &self.cfg
    }

    pub fn pending(&self) -> &[PackSample] {
        &self.pending
    }

    fn check(&self, s: &PackSample) -> Result<()> {
        if s.tokens.len() > self.cfg.context || s.tiles > self.cfg.max_tiles {
            return Err(Error::SampleTooLarge {
                key: s.key.clone(),
                tokens: s.tokens.len(),
                tiles: s.tiles,
                context: self.cfg.context,
                max_tiles: self.cfg.max_tiles,
            });
        }
        Ok(())
    }

    fn fits(&self, s: &PackSample) -> bool {
        self.tokens + s.tokens.len() <= self.cfg.context && self.tiles + s.tiles <= self.cfg.max_tiles
    }

    fn add(&mut self, s: PackSample) {
        self.tokens += s.tokens.len();
        self.tiles += s.tiles;
        self.pending.push(s);
    }

    /// Adds a sample, returning the pack it closed, if any.
    ///
    /// An oversized sample is rejected and leaves the packer unchanged.
    pub fn push(&mut self, s: PackSample) -> Result<Option<PackedBatch>> {
        self.check(&s)?;
        if self.fits(&s) {
            self.add(s);
            return Ok(None);
        }
        let done = self.flush();
        self.add(s);
        Ok(done)
    }

    /// Emits the open pack, if it holds anything.
    pub fn flush(&mut self) -> Option<PackedBatch> {
        if self.pending.is_empty() {
            return None;
        }
        let n = self.cfg.context;
        let mut tokens = Vec::with_capacity(n);
        let mut segments = Vec::with_capacity(n);
        let mut keys = Vec::with_capacity(self.pending.len());
        for (i, s) in self.pending.drain(..).enumerate() {
            tokens.extend_from_slice(&s.tokens);
            segments.extend(core::iter::repeat(i as u32 + 1).take(s.tokens.len()));
            keys.push(s.key);
        }
        tokens.resize(n, self.cfg.pad_id);
        segments.resize(n, PAD_SEGMENT);
        let batch = PackedBatch {
            tokens,
            segments,
            tiles: self.tiles,
            keys,
        };
        self.tokens = 0;
        self.tiles = 0;
        Some(batch)
    }
}

/// Iterator adapter over [`Packer`]; oversized samples surface as errors
/// and are skipped.
pub struct Pack<I> {
    source: I,
    packer: Packer,
    done: bool,
}

impl<I: Iterator<Item = PackSample>> Iterator for Pack<I> {
    type Item = Result<PackedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        for s in self.source.by_ref() {
            match self.packer.push(s) {
                Ok(Some(b)) => return Some(Ok(b)),
                Ok(None) => {}
                Err(e) => return Some(Err(e)),
            }
        }
        self.done = true;
        self.packer.flush().map(Ok)
    }
}

pub fn pack<I: IntoIterator<Item = PackSample>>(samples: I, cfg: PackConfig) -> Result<Pack<I::IntoIter>> {
    Ok(Pack {
        source: samples.into_iter(),
        packer: Packer::new(cfg)?,
        done: false,
    })
}
