//! Pre-shuffled, equal-sized tar chunks plus a JSON manifest.
//!
//! Samples are keyed by their original index as zero-padded decimal; every
//! member of a sample is stored as `{key}.{ext}` and members of one sample
//! are adjacent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use th2_core::mix::Exhausted;
use th2_core::SplitMix64;

use crate::error::io_err;
use crate::source::ByteSource;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const KEY_WIDTH: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub ext: String,
    pub data: Vec<u8>,
}

impl Member {
    pub fn new(ext: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        Self {
            ext: ext.into(),
            data: data.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub key: String,
    pub members: Vec<Member>,
}

impl Sample {
    pub fn member(&self, ext: &str) -> Option<&[u8]> {
        self.members.iter().find(|m| m.ext == ext).map(|m| m.data.as_slice())
    }
}

pub fn format_key(index: usize) -> String {
    format!("{index:0KEY_WIDTH$}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub total: usize,
    pub samples_per_chunk: usize,
    pub seed: u64,
    pub on_exhausted: Exhausted,
    pub chunks: Vec<ChunkInfo>,
}

impl Manifest {
    /// Counts must add up and every chunk but the last must be full.
    pub fn validate(&self) -> Result<()> {
        let sum: usize = self.chunks.iter().map(|c| c.count).sum();
        if sum != self.total {
            return Err(Error::Integrity(format!(
                "{}: chunk counts sum to {sum}, manifest total is {}",
                self.dataset, self.total
            )));
        }
        let last = self.chunks.len().saturating_sub(1);
        for (i, c) in self.chunks.iter().enumerate() {
            let ok = if i < last {
                c.count == self.samples_per_chunk
            } else {
                (1..=self.samples_per_chunk).contains(&c.count)
            };
            if !ok {
                return Err(Error::Integrity(format!(
                    "{}: chunk {} holds {} samples with chunk size {}",
                    c.file, i, c.count, self.samples_per_chunk
                )));
            }
        }
        Ok(())
    }

    pub fn load(source: &dyn ByteSource) -> Result<Self> {
        let bytes = source.read_all(MANIFEST)?;
        let m: Self = serde_json::from_slice(&bytes)?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardOptions {
    pub dataset: String,
    pub samples_per_chunk: usize,
    pub seed: u64,
    pub on_exhausted: Exhausted,
}

fn check_name(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['/', '\\', '\0']) {
        return Err(Error::Input(format!(
            "{what} {s:?} must be non-empty without path separators"
        )));
    }
    Ok(())
}

/// Serialized ustar archive with fixed metadata, so equal input gives equal bytes.
pub fn write_tar(entries: &[(String, &[u8])]) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (name, data) in entries {
        let mut header = tar::Header::new_ustar();
        header
            .set_path(name)
            .map_err(|e| Error::Input(format!("member name {name:?}: {e}")))?;
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        header.set_cksum();
        builder.append(&header, *data).map_err(io_err(name.as_str()))?;
    }
    builder.into_inner().map_err(io_err("<tar>"))
}

/// Shuffles `samples` with the seeded generator, cuts them into chunks and
/// writes the archives plus manifest into `out_dir`.
pub fn build_shards(samples: &[Vec<Member>], opts: &ShardOptions, out_dir: &Path) -> Result<Manifest> {
    if samples.is_empty() {
        return Err(Error::Input(String::from("cannot shard an empty dataset")));
    }
    if opts.samples_per_chunk == 0 {
        return Err(Error::Input(String::from("samples_per_chunk must be at least 1")));
    }
    check_name("dataset id", &opts.dataset)?;
    for s in samples {
        if s.is_empty() {
            return Err(Error::Input(String::from("every sample needs at least one member")));
        }
        for m in s {
            check_name("member extension", &m.ext)?;
        }
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    SplitMix64::new(opts.seed).shuffle(&mut order);

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut chunks = Vec::new();
    for (i, group) in order.chunks(opts.samples_per_chunk).enumerate() {
        let mut entries = Vec::new();
        for &idx in group {
            let key = format_key(idx);
            for m in &samples[idx] {
                entries.push((format!("{key}.{}", m.ext), m.data.as_slice()));
            }
        }
        let file = format!("{}-{i:06}.tar", opts.dataset);
        let path = out_dir.join(&file);
        fs::write(&path, write_tar(&entries)?).map_err(io_err(&path))?;
        chunks.push(ChunkInfo {
            file,
            count: group.len(),
        });
    }
    let manifest = Manifest {
        dataset: opts.dataset.clone(),
        total: samples.len(),
        samples_per_chunk: opts.samples_per_chunk,
        seed: opts.seed,
        on_exhausted: opts.on_exhausted,
        chunks,
    };
    let path = out_dir.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Chunk `i` goes to worker `i mod workers`.
pub fn assign_chunks(chunks: usize, workers: usize) -> Result<Vec<Vec<usize>>> {
    if workers == 0 {
        return Err(Error::Input(String::from("need at least one worker")));
    }
    let mut out = vec![Vec::new(); workers];
    for i in 0..chunks {
        out[i % workers].push(i);
    }
    Ok(out)
}

/// Groups the files of `dir` into samples by file stem (text before the
/// first dot), in lexicographic stem order.
pub fn samples_from_dir(dir: &Path) -> Result<Vec<Vec<Member>>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    let mut samples: Vec<(String, Vec<Member>)> = Vec::new();
    for path in files {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let Some((stem, ext)) = name.split_once('.') else {
            return Err(Error::Input(format!("{name}: expected <stem>.<ext>")));
        };
        let data = fs::read(&path).map_err(io_err(&path))?;
        let member = Member::new(ext, data);
        match samples.last_mut() {
            Some((s, members)) if s == stem => members.push(member),
            _ => samples.push((stem.to_string(), vec![member])),
        }
    }
    Ok(samples.into_iter().map(|(_, m)| m).collect())
}
