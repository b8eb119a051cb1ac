//! Persistent response cache: one file per key, content-addressed filename.
//!
//! Each stochastic sample is cached under its own key (sample index included),
//! so a warm cache replays any run byte-identically and a smaller `m` reuses
//! the samples already drawn. Writes go through a temp file plus rename, so
//! concurrent writers of distinct keys never interleave and same-key writers
//! serialize on the rename.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UspError};
use crate::gateway::{Backend, BackendResponse, DecodeParams};
use crate::hashing::sha_hex;
use crate::model::ClassDistribution;

/// Cached payload: exactly what the wrapped call returned.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CachedValue {
    Completion { text: String },
    Distribution { dist: ClassDistribution },
}

/// A writable key-value directory.
#[derive(Debug, Clone)]
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| UspError::StoreIo {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(FileStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn read(&self, key: &str) -> Result<Option<CachedValue>> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(UspError::StoreIo {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })
            }
        };
        let value = serde_json::from_slice(&bytes).map_err(|e| UspError::StoreIo {
            path: path.display().to_string(),
            reason: format!("corrupted cache entry: {e}"),
        })?;
        Ok(Some(value))
    }

    fn write(&self, key: &str, value: &CachedValue) -> Result<()> {
        let path = self.path_for(key);
        let bytes = serde_json::to_vec(value).expect("cache values serialize");
        let tmp = self.dir.join(format!(
            ".{key}.{}.tmp",
            std::process::id()
        ));
        let io_err = |e: std::io::Error| UspError::StoreIo {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        std::fs::write(&tmp, &bytes).map_err(io_err)?;
        std::fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }
}

/// Wrap any backend with the persistent cache. Full hits never contact the
/// wrapped backend; any miss refetches the whole request and writes every
/// sample before returning.
pub struct CachedBackend<B> {
    inner: B,
    store: FileStore,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, store: FileStore) -> Self {
        CachedBackend { inner, store }
    }

    fn generate_key(&self, prompt: &str, params: &DecodeParams, sample: usize) -> String {
        let temp = format!("{:x}", params.temperature.to_bits());
        let max_tokens = params.max_tokens.to_string();
        let sample = sample.to_string();
        let mut parts: Vec<&str> = vec!["gen", "v1"];
        let id = self.inner.id();
        parts.push(&id);
        parts.push(prompt);
        parts.push(&temp);
        parts.push(&max_tokens);
        for stop in &params.stop_sequences {
            parts.push(stop);
        }
        parts.push(&sample);
        sha_hex(&parts)
    }

    fn score_key(&self, prompt: &str, options: &[String]) -> String {
        let mut parts: Vec<&str> = vec!["score", "v1"];
        let id = self.inner.id();
        parts.push(&id);
        parts.push(prompt);
        for option in options {
            parts.push(option);
        }
        sha_hex(&parts)
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<BackendResponse> {
        params.validate()?;
        let mut cached = Vec::with_capacity(params.num_samples);
        for sample in 0..params.num_samples {
            match self.store.read(&self.generate_key(prompt, params, sample))? {
                Some(CachedValue::Completion { text }) => cached.push(text),
                _ => break,
            }
        }
        if cached.len() == params.num_samples {
            return Ok(BackendResponse::completions(cached));
        }
        let response = self.inner.generate(prompt, params)?;
        for (sample, text) in response.completions.iter().enumerate() {
            self.store.write(
                &self.generate_key(prompt, params, sample),
                &CachedValue::Completion { text: text.clone() },
            )?;
        }
        Ok(response)
    }

    fn score_options(&self, prompt: &str, options: &[String]) -> Result<ClassDistribution> {
        let key = self.score_key(prompt, options);
        if let Some(CachedValue::Distribution { dist }) = self.store.read(&key)? {
            return Ok(dist);
        }
        let dist = self.inner.score_options(prompt, options)?;
        self.store.write(&key, &CachedValue::Distribution { dist: dist.clone() })?;
        Ok(dist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CountingBackend, OracleEntry, SyntheticBackend, SyntheticOracleSpec};

    fn backend() -> SyntheticBackend {
        SyntheticBackend::new(SyntheticOracleSpec::new(
            vec![OracleEntry {
                id: "q1".into(),
                text: "name the largest planet".into(),
                answer: "jupiter".into(),
            }],
            1.0,
            3,
        ))
    }

    #[test]
    fn second_call_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let counter = CountingBackend::new(backend());
        let cached = CachedBackend::new(&counter, FileStore::open(dir.path()).unwrap());
        let params = DecodeParams::sampled(0.7, 4, 16);
        let first = cached.generate("Q: name the largest planet\nA:", &params).unwrap();
        assert_eq!(counter.decode_ops(), 4);
        let second = cached.generate("Q: name the largest planet\nA:", &params).unwrap();
        assert_eq!(counter.decode_ops(), 4, "hit must not reach the backend");
        assert_eq!(first, second);
    }

    #[test]
    fn different_temperature_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let counter = CountingBackend::new(backend());
        let cached = CachedBackend::new(&counter, FileStore::open(dir.path()).unwrap());
        let prompt = "Q: name the largest planet\nA:";
        cached.generate(prompt, &DecodeParams::sampled(0.7, 2, 16)).unwrap();
        cached.generate(prompt, &DecodeParams::sampled(0.9, 2, 16)).unwrap();
        assert_eq!(counter.decode_ops(), 4);
    }

    #[test]
    fn smaller_sample_count_reuses_cached_samples() {
        let dir = tempfile::tempdir().unwrap();
        let counter = CountingBackend::new(backend());
        let cached = CachedBackend::new(&counter, FileStore::open(dir.path()).unwrap());
        let prompt = "Q: name the largest planet\nA:";
        let six = cached.generate(prompt, &DecodeParams::sampled(0.7, 6, 16)).unwrap();
        let four = cached.generate(prompt, &DecodeParams::sampled(0.7, 4, 16)).unwrap();
        assert_eq!(counter.decode_ops(), 6);
        assert_eq!(four.completions, six.completions[..4].to_vec());
    }

    #[test]
    fn scoring_is_cached_too() {
        let dir = tempfile::tempdir().unwrap();
        let counter = CountingBackend::new(backend());
        let cached = CachedBackend::new(&counter, FileStore::open(dir.path()).unwrap());
        let options = vec!["jupiter".to_string(), "mars".to_string()];
        let a = cached.score_options("Q: name the largest planet\nA:", &options).unwrap();
        let b = cached.score_options("Q: name the largest planet\nA:", &options).unwrap();
        assert_eq!(counter.scoring_ops(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_entry_surfaces_store_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let cached = CachedBackend::new(backend(), store.clone());
        let params = DecodeParams::greedy(16);
        let prompt = "Q: name the largest planet\nA:";
        cached.generate(prompt, &params).unwrap();
        // clobber the single entry on disk
        let entry = std::fs::read_dir(dir.path())
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        std::fs::write(&entry, b"{not json").unwrap();
        let err = cached.generate(prompt, &params).unwrap_err();
        match err {
            UspError::StoreIo { path, reason } => {
                assert!(path.ends_with(".json"));
                assert!(reason.contains("corrupted"));
            }
            other => panic!("expected StoreIo, got {other:?}"),
        }
    }
}
