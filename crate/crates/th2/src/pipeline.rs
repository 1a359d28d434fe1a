//! Stream → mix → pack, with byte-exact snapshots.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use th2_core::mix::{Exhausted, Mixer};
use th2_core::packing::{PackConfig, PackSample, PackedBatch, Packer};
use th2_core::SplitMix64;

use crate::shard::{Member, Sample};
use crate::source::{LocalDir, SharedSource};
use crate::stream::{DatasetReader, ReaderState};
use crate::{Error, Result};

pub const SNAPSHOT_VERSION: u32 = 1;
/// Member holding `{"tokens": [...], "tiles": n}` for packing.
pub const PACK_MEMBER: &str = "json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub datasets: Vec<DatasetSpec>,
    pub workers: usize,
    pub seed: u64,
    /// Packing is skipped when absent.
    pub pack: Option<PackConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerState {
    /// Generator state as 16 hex digits.
    pub rng: String,
    pub live: Vec<bool>,
}

/// Everything needed to continue a pipeline exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub version: u32,
    pub config: PipelineConfig,
    pub datasets: Vec<ReaderState>,
    pub mixer: MixerState,
    /// Samples already placed in the open pack.
    pub pending: Vec<PackSample>,
}

impl ResumeState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(s)?;
        if state.version != SNAPSHOT_VERSION {
            return Err(Error::Input(format!("unsupported snapshot version {}", state.version)));
        }
        Ok(state)
    }
}

pub fn encode_rng(rng: SplitMix64) -> String {
    hex::encode(rng.state().to_be_bytes())
}

pub fn decode_rng(s: &str) -> Result<SplitMix64> {
    let bytes = hex::decode(s).map_err(|e| Error::Input(format!("rng state {s:?}: {e}")))?;
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| Error::Input(format!("rng state {s:?} must be 16 hex digits")))?;
    Ok(SplitMix64::from_state(u64::from_be_bytes(arr)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedSample {
    pub dataset: String,
    pub key: String,
    pub members: Vec<Member>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Emitted {
    Sample(MixedSample),
    Batch(PackedBatch),
}

#[derive(Deserialize)]
struct PackPayload {
    tokens: Vec<u32>,
    tiles: u32,
}

/// Packer view of a sample: its `json` member parsed, keyed `dataset/key`.
pub fn pack_sample(dataset: &str, sample: &Sample) -> Result<PackSample> {
    let raw = sample
        .member(PACK_MEMBER)
        .ok_or_else(|| Error::Input(format!("{dataset}/{}: no .{PACK_MEMBER} member", sample.key)))?;
    let p: PackPayload = serde_json::from_slice(raw)?;
    Ok(PackSample {
        key: format!("{dataset}/{}", sample.key),
        tokens: p.tokens,
        tiles: p.tiles,
    })
}

#[derive(Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    readers: Vec<DatasetReader>,
    mixer: Mixer,
    packer: Option<Packer>,
}

impl Pipeline {
    /// Opens every dataset directory on the local filesystem.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        let sources = local_sources(&config);
        Self::with_sources(config, sources)
    }

    pub fn with_sources(config: PipelineConfig, sources: Vec<SharedSource>) -> Result<Self> {
        if config.datasets.is_empty() || sources.len() != config.datasets.len() {
            return Err(Error::Input(String::from(
                "need one source per dataset, at least one dataset",
            )));
        }
        let readers = sources
            .into_iter()
            .map(|s| DatasetReader::open(s, config.workers))
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = config.datasets.iter().map(|d| d.weight).collect();
        let mixer = Mixer::new(&weights, SplitMix64::new(config.seed))?;
        let packer = config.pack.map(Packer::new).transpose()?;
        Ok(Self {
            config,
            readers,
            mixer,
            packer,
        })
    }

    pub fn resume(state: &ResumeState) -> Result<Self> {
        let sources = local_sources(&state.config);
        Self::resume_with_sources(state, sources)
    }

    pub fn resume_with_sources(state: &ResumeState, sources: Vec<SharedSource>) -> Result<Self> {
        let mut p = Self::with_sources(state.config.clone(), sources)?;
        if state.datasets.len() != p.readers.len() {
            return Err(Error::Input(String::from(
                "snapshot dataset count does not match config",
            )));
        }
        for (r, s) in p.readers.iter_mut().zip(&state.datasets) {
            r.restore(s)?;
        }
        let weights: Vec<f64> = state.config.datasets.iter().map(|d| d.weight).collect();
        p.mixer = Mixer::restore(&weights, state.mixer.live.clone(), decode_rng(&state.mixer.rng)?)?;
        p.packer = match state.config.pack {
            Some(cfg) => Some(Packer::with_pending(cfg, state.pending.clone())?),
            None if state.pending.is_empty() => None,
            None => return Err(Error::Input(String::from("pending samples without a pack config"))),
        };
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Only meaningful between emissions.
    pub fn snapshot(&self) -> ResumeState {
        ResumeState {
            version: SNAPSHOT_VERSION,
            config: self.config.clone(),
            datasets: self.readers.iter().map(DatasetReader::state).collect(),
            mixer: MixerState {
                rng: encode_rng(self.mixer.rng()),
                live: self.mixer.live().to_vec(),
            },
            pending: self.packer.as_ref().map(|p| p.pending().to_vec()).unwrap_or_default(),
        }
    }

    /// Next sample from source `src`, honoring its exhaustion policy.
    fn pull(&mut self, src: usize) -> Option<Result<Sample>> {
        let reader = &mut self.readers[src];
        if let Some(item) = reader.next() {
            return Some(item);
        }
        if reader.manifest().on_exhausted == Exhausted::Cycle {
            reader.restart();
            if let Some(item) = reader.next() {
                return Some(item);
            }
        }
        None
    }
}

fn local_sources(config: &PipelineConfig) -> Vec<SharedSource> {
    config
        .datasets
        .iter()
        .map(|d| Arc::new(LocalDir::new(&d.path)) as SharedSource)
        .collect()
}

impl Iterator for Pipeline {
    type Item = Result<Emitted>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let Some(src) = self.mixer.choose() else {
                return self.packer.as_mut()?.flush().map(|b| Ok(Emitted::Batch(b)));
            };
            let sample = match self.pull(src) {
                Some(Ok(s)) => s,
                Some(Err(e)) => return Some(Err(e)),
                None => {
                    self.mixer.retire(src);
                    continue;
                }
            };
            let dataset = self.readers[src].manifest().dataset.clone();
            let Some(packer) = self.packer.as_mut() else {
                return Some(Ok(Emitted::Sample(MixedSample {
                    dataset,
                    key: sample.key,
                    members: sample.members,
                })));
            };
            let ps = match pack_sample(&dataset, &sample) {
                Ok(ps) => ps,
                Err(e) => return Some(Err(e)),
            };
            match packer.push(ps) {
                Ok(Some(batch)) => return Some(Ok(Emitted::Batch(batch))),
                Ok(None) => {}
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}
