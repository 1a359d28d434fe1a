//! Sequential per-worker readers with resumable positions.

use std::collections::VecDeque;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::shard::{assign_chunks, Manifest, Member, Sample};
use crate::source::SharedSource;
use crate::{Error, Result};

fn stream_err(chunk: &str, member: &str, reason: impl ToString) -> Error {
    Error::Stream {
        chunk: chunk.to_string(),
        member: member.to_string(),
        reason: reason.to_string(),
    }
}

/// Reads chunk `index`, discarding its first `skip` samples unread.
///
/// Members of skipped samples are passed over by seeking; only their headers
/// are parsed.
pub fn read_chunk(source: &SharedSource, manifest: &Manifest, index: usize, skip: usize) -> Result<VecDeque<Sample>> {
    let info = manifest
        .chunks
        .get(index)
        .ok_or_else(|| Error::Input(format!("chunk {index} out of range")))?;
    let name = info.file.as_str();
    let mut archive = tar::Archive::new(source.open(name)?);
    let entries = archive
        .entries_with_seek()
        .map_err(|e| stream_err(name, "<archive>", e))?;
    let mut out = VecDeque::new();
    let mut seen = 0usize;
    let mut current: Option<String> = None;
    let mut last = String::from("<start>");
    for entry in entries {
        let mut entry = entry.map_err(|e| stream_err(name, &format!("after {last}"), e))?;
        let path = entry
            .path()
            .map_err(|e| stream_err(name, &format!("after {last}"), e))?
            .to_string_lossy()
            .into_owned();
        let Some((key, ext)) = path.split_once('.') else {
            return Err(stream_err(name, &path, "member name is not <key>.<ext>"));
        };
        if current.as_deref() != Some(key) {
            seen += 1;
            current = Some(key.to_string());
            if seen > skip {
                out.push_back(Sample {
                    key: key.to_string(),
                    members: Vec::new(),
                });
            }
        }
        if seen > skip {
            let size = entry.size();
            let mut data = Vec::with_capacity(size as usize);
            entry.read_to_end(&mut data).map_err(|e| stream_err(name, &path, e))?;
            if data.len() as u64 != size {
                return Err(stream_err(
                    name,
                    &path,
                    format!("truncated: {} of {size} bytes", data.len()),
                ));
            }
            let sample = out.back_mut().expect("sample opened above");
            sample.members.push(Member::new(ext, data));
        }
        last = path;
    }
    if seen != info.count {
        return Err(Error::Integrity(format!(
            "{name}: manifest lists {} samples, archive holds {seen}",
            info.count
        )));
    }
    Ok(out)
}

/// Position of one worker: the chunk being read (global index, `None` once
/// the worker is done) and how many of its samples were already emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerState {
    pub chunk: Option<usize>,
    pub offset: usize,
}

/// Streams the chunks assigned to one worker, in order.
#[derive(Debug)]
pub struct WorkerStream {
    source: SharedSource,
    manifest: Arc<Manifest>,
    chunks: Vec<usize>,
    cursor: usize,
    offset: usize,
    buffer: Option<VecDeque<Sample>>,
}

impl WorkerStream {
    pub fn new(source: SharedSource, manifest: Arc<Manifest>, chunks: Vec<usize>) -> Self {
        Self {
            source,
            manifest,
            chunks,
            cursor: 0,
            offset: 0,
            buffer: None,
        }
    }

    pub fn chunks(&self) -> &[usize] {
        &self.chunks
    }

    pub fn state(&self) -> WorkerState {
        WorkerState {
            chunk: self.chunks.get(self.cursor).copied(),
            offset: self.offset,
        }
    }

    /// Jumps to `state`; the next chunk read skips already-emitted samples.
    pub fn seek(&mut self, state: WorkerState) -> Result<()> {
        let cursor = match state.chunk {
            None => self.chunks.len(),
            Some(c) => self
                .chunks
                .iter()
                .position(|&x| x == c)
                .ok_or_else(|| Error::Input(format!("chunk {c} is not assigned to this worker")))?,
        };
        if let Some(c) = state.chunk {
            if state.offset > self.manifest.chunks[c].count {
                return Err(Error::Input(format!("offset {} beyond chunk {c}", state.offset)));
            }
        }
        self.cursor = cursor;
        self.offset = state.offset;
        self.buffer = None;
        Ok(())
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
        self.offset = 0;
        self.buffer = None;
    }
}

impl Iterator for WorkerStream {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let &chunk = self.chunks.get(self.cursor)?;
            if self.buffer.is_none() {
                match read_chunk(&self.source, &self.manifest, chunk, self.offset) {
                    Ok(b) => self.buffer = Some(b),
                    Err(e) => return Some(Err(e)),
                }
            }
            match self.buffer.as_mut().and_then(VecDeque::pop_front) {
                Some(s) => {
                    self.offset += 1;
                    return Some(Ok(s));
                }
                None => {
                    self.cursor += 1;
                    self.offset = 0;
                    self.buffer = None;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderState {
    pub epoch: u64,
    pub next_worker: usize,
    pub workers: Vec<WorkerState>,
}

/// All workers of one dataset, drained round-robin.
#[derive(Debug)]
pub struct DatasetReader {
    manifest: Arc<Manifest>,
    workers: Vec<WorkerStream>,
    next_worker: usize,
    epoch: u64,
}

impl DatasetReader {
    pub fn open(source: SharedSource, workers: usize) -> Result<Self> {
        let manifest = Arc::new(Manifest::load(source.as_ref())?);
        let plan = assign_chunks(manifest.chunks.len(), workers)?;
        let workers = plan
            .into_iter()
            .map(|chunks| WorkerStream::new(Arc::clone(&source), Arc::clone(&manifest), chunks))
            .collect();
        Ok(Self {
            manifest,
            workers,
            next_worker: 0,
            epoch: 0,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn workers(&self) -> &[WorkerStream] {
        &self.workers
    }

    pub fn worker_mut(&mut self, w: usize) -> &mut WorkerStream {
        &mut self.workers[w]
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn state(&self) -> ReaderState {
        ReaderState {
            epoch: self.epoch,
            next_worker: self.next_worker,
            workers: self.workers.iter().map(WorkerStream::state).collect(),
        }
    }

    pub fn restore(&mut self, state: &ReaderState) -> Result<()> {
        if state.workers.len() != self.workers.len() || state.next_worker >= self.workers.len() {
            return Err(Error::Input(format!(
                "snapshot has {} workers, reader has {}",
                state.workers.len(),
                self.workers.len()
            )));
        }
        for (w, s) in self.workers.iter_mut().zip(&state.workers) {
            w.seek(*s)?;
        }
        self.next_worker = state.next_worker;
        self.epoch = state.epoch;
        Ok(())
    }

    /// Starts the next epoch from the first chunk of every worker.
    pub fn restart(&mut self) {
        self.epoch += 1;
        self.next_worker = 0;
        self.workers.iter_mut().for_each(WorkerStream::rewind);
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let n = self.workers.len();
        for _ in 0..n {
            let w = self.next_worker;
            self.next_worker = (w + 1) % n;
            if let Some(item) = self.workers[w].next() {
                return Some(item);
            }
        }
        None
    }
}
