//! Content-addressed response cache.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::backend::CompletionResponse;
use crate::prompt::ChatMessage;

/// Responses keyed by SHA-256 of the backend fingerprint and transcript.
/// Always memoizes in memory; with a directory, also persists one
/// `<key>.json` file per response.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, CompletionResponse>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: Some(dir.into()), memory: Mutex::default() }
    }

    pub fn key(fingerprint: &str, messages: &[ChatMessage]) -> String {
        let mut h = Sha256::new();
        h.update(fingerprint.as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(messages).expect("messages serialize"));
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<CompletionResponse> {
        if let Some(hit) = self.memory.lock().unwrap_or_else(|e| e.into_inner()).get(key) {
            return Some(hit.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<CompletionResponse>(&bytes) {
            Ok(resp) => {
                self.memory.lock().unwrap_or_else(|e| e.into_inner()).insert(key.to_string(), resp.clone());
                Some(resp)
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable cache entry");
                None
            }
        }
    }

    pub fn put(&self, key: &str, response: &CompletionResponse) {
        self.memory.lock().unwrap_or_else(|e| e.into_inner()).insert(key.to_string(), response.clone());
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            let write = serde_json::to_vec(response)
                .map_err(std::io::Error::from)
                .and_then(|bytes| crate::io::write_atomic(&path, &bytes));
            if let Err(e) = write {
                tracing::warn!(path = %path.display(), error = %e, "cannot persist cache entry");
            }
        }
    }
}
