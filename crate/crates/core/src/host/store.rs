//! Host-side file storage. Anything here is readable and writable by the
//! adversary.
//!
//! On disk the store is one flat file:
//!
//! ```text
//! magic  "EIDSTORE"          8 bytes
//! count  u32 big-endian
//! count × { key_len u32, key utf-8, value_len u32, value }
//! ```
//!
//! Entries are written in key order, so equal stores give equal files.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::wire::{DecodeError, Reader, Writer};

pub const TOKEN_FILE: &str = "eid-token";
const MAGIC: &[u8; 8] = b"EIDSTORE";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no file named {0}")]
    MissingKey(String),
    #[error("store file is malformed: {0}")]
    Malformed(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UntrustedStore {
    files: BTreeMap<String, Vec<u8>>,
}

impl UntrustedStore {
    pub fn put(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn load(&self, name: &str) -> Result<&[u8], StoreError> {
        self.get(name).ok_or_else(|| StoreError::MissingKey(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<u8>> {
        self.files.get_mut(name)
    }

    pub fn files(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.files.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC).u32(self.files.len() as u32);
        for (k, v) in &self.files {
            w.str(k).bytes(v);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if &r.array::<8>()? != MAGIC {
            return Err(DecodeError::Invalid("store magic"));
        }
        let mut files = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.bytes()?.to_vec();
            if files.insert(k, v).is_some() {
                return Err(DecodeError::Invalid("duplicate key"));
            }
        }
        r.finish()?;
        Ok(Self { files })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(Self::decode(&std::fs::read(path)?)?)
    }
}
