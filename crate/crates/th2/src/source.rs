//! Byte sources that shards are read from.
//!
//! Readers only need `open` plus seeking, so an object-store client can stand
//! in for the local directory without touching the stream logic.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Cursor, Read, Seek};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::io_err;
use crate::Result;

pub trait ReadSeek: Read + Seek {}

impl<T: Read + Seek> ReadSeek for T {}

pub trait ByteSource: fmt::Debug + Send + Sync {
    /// Seekable reader over the object `name`.
    fn open(&self, name: &str) -> Result<Box<dyn ReadSeek + '_>>;

    fn read_all(&self, name: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.open(name)?.read_to_end(&mut buf).map_err(io_err(name))?;
        Ok(buf)
    }

    /// Human-readable location, used in snapshots and messages.
    fn describe(&self) -> String;
}

pub type SharedSource = Arc<dyn ByteSource>;

/// Objects are files directly under `root`.
#[derive(Debug, Clone)]
pub struct LocalDir {
    root: PathBuf,
}

impl LocalDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ByteSource for LocalDir {
    fn open(&self, name: &str) -> Result<Box<dyn ReadSeek + '_>> {
        let path = self.root.join(name);
        let f = File::open(&path).map_err(io_err(path))?;
        Ok(Box::new(BufReader::new(f)))
    }

    fn describe(&self) -> String {
        self.root.display().to_string()
    }
}

/// In-memory objects.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    objects: HashMap<String, Vec<u8>>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.objects.insert(name.into(), bytes);
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<u8>> {
        self.objects.get_mut(name)
    }

    /// Copies every regular file of `dir` (non-recursive).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut src = Self::new();
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            let path = entry.path();
            if path.is_file() {
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                src.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
            }
        }
        Ok(src)
    }
}

impl ByteSource for MemorySource {
    fn open(&self, name: &str) -> Result<Box<dyn ReadSeek + '_>> {
        match self.objects.get(name) {
            Some(b) => Ok(Box::new(Cursor::new(b.as_slice()))),
            None => Err(io_err(name)(std::io::Error::from(std::io::ErrorKind::NotFound))),
        }
    }

    fn describe(&self) -> String {
        String::from("<memory>")
    }
}
