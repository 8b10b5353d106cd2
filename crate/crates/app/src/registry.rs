//! Per-user profiles: soft prompt with version history, conversation memory
//! and an optional fine-tuned checkpoint.
//!
//! On-disk layout under the registry root:
//!
//! ```text
//! users/<id>/profile.json        default strategy, current prompt version
//! users/<id>/prompts/v0001.bin   every uploaded soft prompt, never rewritten
//! users/<id>/memory.jsonl        append-only selections
//! users/<id>/finetuned.ckpt      optional full checkpoint
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use abbrex_core::corpus::{AbbrevExample, Source};
use abbrex_core::eval::Strategy;
use abbrex_core::model::checkpoint::{soft_prompt_from_bytes, stored_digest};
use abbrex_core::model::{load_checkpoint, Model, SoftPrompt};
use abbrex_core::retrieval::{memory_line, RetrievalIndex};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{AppError, Result};

pub fn validate_user_id(id: &str) -> Result<()> {
    let ok = (1..=64).contains(&id.len())
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(AppError::InvalidUserId(id.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct StoredPrompt {
    pub version: u32,
    pub prompt: Arc<SoftPrompt>,
    /// The uploaded container, byte for byte.
    pub bytes: Arc<Vec<u8>>,
}

pub struct UserProfile {
    pub user_id: String,
    pub default_strategy: Strategy,
    pub soft_prompt: Option<StoredPrompt>,
    pub memory: RetrievalIndex,
    pub fine_tuned: Option<Arc<Model>>,
    /// Versions of every prompt ever accepted, oldest first.
    pub prompt_history: Vec<u32>,
}

impl UserProfile {
    fn new(user_id: &str) -> Self {
        Self {
            user_id: user_id.to_string(),
            default_strategy: Strategy::Base,
            soft_prompt: None,
            memory: RetrievalIndex::default(),
            fine_tuned: None,
            prompt_history: Vec::new(),
        }
    }

    pub fn summary(&self) -> ProfileSummary {
        ProfileSummary {
            user_id: self.user_id.clone(),
            default_strategy: self.default_strategy,
            prompt: self.soft_prompt.as_ref().map(|p| PromptSummary {
                version: p.version,
                length: p.prompt.len(),
                init_strategy: p.prompt.init_strategy.to_string(),
                base_digest: p.prompt.base_digest.clone(),
            }),
            prompt_history: self.prompt_history.clone(),
            memory_size: self.memory.len(),
            fine_tuned: self.fine_tuned.is_some(),
        }
    }

    /// Memory entries in insertion order.
    pub fn memory_records(&self) -> Vec<MemoryRecord> {
        self.memory
            .entries()
            .iter()
            .map(|e| MemoryRecord {
                abbreviation: e.example.abbreviation.clone(),
                expansion: e.example.expansion.clone(),
                timestamp: e.example.timestamp,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub version: u32,
    pub length: usize,
    pub init_strategy: String,
    pub base_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub user_id: String,
    pub default_strategy: Strategy,
    pub prompt: Option<PromptSummary>,
    pub prompt_history: Vec<u32>,
    pub memory_size: usize,
    pub fine_tuned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub abbreviation: String,
    pub expansion: String,
    pub timestamp: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ProfileFile {
    default_strategy: Option<Strategy>,
    prompt_version: Option<u32>,
    #[serde(default)]
    prompt_history: Vec<u32>,
}

pub type SharedProfile = Arc<RwLock<UserProfile>>;

/// All known users. Profiles are individually locked so one user's writes
/// never block another's reads.
pub struct Registry {
    root: Option<PathBuf>,
    base_digest: String,
    d_model: usize,
    users: RwLock<HashMap<String, SharedProfile>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl Registry {
    /// Purely in-memory registry.
    pub fn ephemeral(base: &Model) -> Self {
        Self {
            root: None,
            base_digest: base.digest(),
            d_model: base.config().d_model,
            users: RwLock::new(HashMap::new()),
        }
    }

    /// Loads every user under `root`, creating the directory if needed.
    /// Prompts tuned against another base are kept on disk but not served.
    pub fn open(root: &Path, base: &Model) -> Result<Self> {
        let reg = Self {
            root: Some(root.to_path_buf()),
            ..Self::ephemeral(base)
        };
        let users_dir = root.join("users");
        fs::create_dir_all(&users_dir)?;
        let mut users = HashMap::new();
        let mut names: Vec<String> = fs::read_dir(&users_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| validate_user_id(n).is_ok())
            .collect();
        names.sort();
        for id in names {
            let profile = reg.load_user(&id)?;
            users.insert(id, Arc::new(RwLock::new(profile)));
        }
        *reg.users.write().expect("registry lock") = users;
        Ok(reg)
    }

    fn user_dir(&self, id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("users").join(id))
    }

    fn load_user(&self, id: &str) -> Result<UserProfile> {
        let dir = self.user_dir(id).expect("persistent registry");
        let mut p = UserProfile::new(id);
        let meta: ProfileFile = match fs::read(dir.join("profile.json")) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ProfileFile::default(),
            Err(e) => return Err(e.into()),
        };
        p.default_strategy = meta.default_strategy.unwrap_or(Strategy::Base);
        p.prompt_history = meta.prompt_history;
        if let Some(v) = meta.prompt_version {
            let bytes = fs::read(prompt_path(&dir, v))?;
            match self.check_prompt(&bytes) {
                Ok(prompt) => {
                    p.soft_prompt = Some(StoredPrompt {
                        version: v,
                        prompt: Arc::new(prompt),
                        bytes: Arc::new(bytes),
                    })
                }
                Err(e) => warn!(user = id, error = %e, "not serving stored soft prompt"),
            }
        }
        let mem_path = dir.join("memory.jsonl");
        if mem_path.exists() {
            let text = fs::read_to_string(&mem_path)?;
            let (memory, torn) = RetrievalIndex::from_jsonl(&text, id, Source::SyntheticUser)?;
            if torn {
                // Drop the partial record so later appends start on a fresh line.
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                warn!(user = id, dropped = text.len() - keep, "recovered torn memory file");
                OpenOptions::new().write(true).open(&mem_path)?.set_len(keep as u64)?;
            }
            p.memory = memory;
        }
        let ckpt = dir.join("finetuned.ckpt");
        if ckpt.exists() {
            p.fine_tuned = Some(Arc::new(load_checkpoint(&ckpt)?));
        }
        Ok(p)
    }

    fn save_profile(&self, p: &UserProfile) -> Result<()> {
        let Some(dir) = self.user_dir(&p.user_id) else {
            return Ok(());
        };
        fs::create_dir_all(&dir)?;
        let meta = ProfileFile {
            default_strategy: Some(p.default_strategy),
            prompt_version: p.soft_prompt.as_ref().map(|s| s.version),
            prompt_history: p.prompt_history.clone(),
        };
        write_atomic(&dir.join("profile.json"), &serde_json::to_vec_pretty(&meta)?)
    }

    pub fn base_digest(&self) -> &str {
        &self.base_digest
    }

    pub fn len(&self) -> usize {
        self.users.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn user_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.users.read().expect("registry lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn get(&self, id: &str) -> Option<SharedProfile> {
        self.users.read().expect("registry lock").get(id).cloned()
    }

    pub fn get_or_create(&self, id: &str) -> Result<SharedProfile> {
        validate_user_id(id)?;
        if let Some(p) = self.get(id) {
            return Ok(p);
        }
        let mut users = self.users.write().expect("registry lock");
        if let Some(p) = users.get(id) {
            return Ok(p.clone());
        }
        let p = UserProfile::new(id);
        self.save_profile(&p)?;
        let shared = Arc::new(RwLock::new(p));
        users.insert(id.to_string(), shared.clone());
        Ok(shared)
    }

    /// Parses a soft-prompt container and checks it against the served base.
    pub fn check_prompt(&self, bytes: &[u8]) -> Result<SoftPrompt> {
        let prompt = soft_prompt_from_bytes(bytes)?;
        if prompt.base_digest != self.base_digest {
            return Err(AppError::BaseMismatch {
                served: self.base_digest.clone(),
                prompt: prompt.base_digest,
            });
        }
        let width = prompt.matrix.shape()[1];
        if width != self.d_model {
            return Err(AppError::PromptShape {
                expected: self.d_model,
                found: width,
            });
        }
        Ok(prompt)
    }

    /// Installs a new prompt version for `id`; the previous one stays on disk.
    pub fn put_prompt(&self, id: &str, bytes: Vec<u8>) -> Result<u32> {
        let prompt = self.check_prompt(&bytes)?;
        let shared = self.get_or_create(id)?;
        let mut p = shared.write().expect("profile lock");
        let version = p.prompt_history.last().copied().unwrap_or(0) + 1;
        if let Some(dir) = self.user_dir(id) {
            fs::create_dir_all(dir.join("prompts"))?;
            write_atomic(&prompt_path(&dir, version), &bytes)?;
        }
        let previous = p.soft_prompt.replace(StoredPrompt {
            version,
            prompt: Arc::new(prompt),
            bytes: Arc::new(bytes),
        });
        p.prompt_history.push(version);
        if let Err(e) = self.save_profile(&p) {
            p.soft_prompt = previous;
            p.prompt_history.pop();
            return Err(e);
        }
        Ok(version)
    }

    pub fn prompt_bytes(&self, id: &str) -> Option<Arc<Vec<u8>>> {
        let p = self.get(id)?;
        let guard = p.read().expect("profile lock");
        guard.soft_prompt.as_ref().map(|s| s.bytes.clone())
    }

    pub fn set_default_strategy(&self, id: &str, strategy: Strategy) -> Result<()> {
        let shared = self.get_or_create(id)?;
        let mut p = shared.write().expect("profile lock");
        p.default_strategy = strategy;
        self.save_profile(&p)
    }

    /// Stores a user-specific checkpoint next to the profile.
    pub fn set_fine_tuned(&self, id: &str, model: Model) -> Result<()> {
        let shared = self.get_or_create(id)?;
        if let Some(dir) = self.user_dir(id) {
            let tmp = dir.join("finetuned.ckpt.tmp");
            abbrex_core::model::save_checkpoint(&model, &tmp)?;
            fs::rename(&tmp, dir.join("finetuned.ckpt"))?;
        }
        shared.write().expect("profile lock").fine_tuned = Some(Arc::new(model));
        Ok(())
    }

    /// Appends `(abbreviation, expansion)` to the user's memory with a
    /// timestamp later than every existing entry, persisting it first.
    pub fn append_memory(&self, id: &str, abbreviation: &str, expansion: &str) -> Result<MemoryRecord> {
        let shared = self.get_or_create(id)?;
        let mut p = shared.write().expect("profile lock");
        let last = p.memory.entries().last().map(|e| e.example.timestamp);
        let timestamp = match last {
            Some(t) => now_millis().max(t + 1),
            None => now_millis(),
        };
        let example = AbbrevExample {
            abbreviation: abbreviation.to_string(),
            expansion: expansion.to_string(),
            context: None,
            timestamp,
            speaker_id: id.to_string(),
            source: Source::SyntheticUser,
        };
        if let Some(dir) = self.user_dir(id) {
            fs::create_dir_all(&dir)?;
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("memory.jsonl"))?;
            f.write_all(memory_line(&example).as_bytes())?;
            f.sync_data()?;
        }
        p.memory.insert(example)?;
        Ok(MemoryRecord {
            abbreviation: abbreviation.to_string(),
            expansion: expansion.to_string(),
            timestamp,
        })
    }

    /// Bulk-loads history (e.g. a user's training split) into memory.
    pub fn seed_memory(&self, id: &str, examples: &[AbbrevExample]) -> Result<usize> {
        for ex in examples {
            self.append_memory(id, &ex.abbreviation, &ex.expansion)?;
        }
        Ok(examples.len())
    }
}

fn prompt_path(user_dir: &Path, version: u32) -> PathBuf {
    user_dir.join("prompts").join(format!("v{version:04}.bin"))
}

/// Digest of a stored prompt container, if it is well formed.
pub fn prompt_digest(bytes: &[u8]) -> Option<String> {
    stored_digest(bytes)
}

#[cfg(test)]
mod tests {
    use abbrex_core::model::checkpoint::soft_prompt_to_bytes;
    use abbrex_core::model::{init_soft_prompt, InitStrategy, ModelConfig, Wordlists};

    use super::*;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            max_context: 64,
            ..Default::default()
        };
        Model::init(cfg, 3).unwrap()
    }

    fn prompt_bytes(m: &Model, seed: u64) -> Vec<u8> {
        let p = init_soft_prompt(InitStrategy::Random, 4, m, &Wordlists::default(), seed, "a").unwrap();
        soft_prompt_to_bytes(&p)
    }

    #[test]
    fn user_ids_are_path_safe() {
        for ok in ["a", "user_1", "A-b"] {
            assert!(validate_user_id(ok).is_ok());
        }
        for bad in ["", "../x", "a/b", "a b", &"x".repeat(65)] {
            assert!(validate_user_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn persists_and_recovers_torn_memory() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny();
        {
            let reg = Registry::open(dir.path(), &m).unwrap();
            reg.append_memory("a", "h t", "hello there").unwrap();
            reg.append_memory("a", "h a y", "how are you").unwrap();
            assert_eq!(reg.put_prompt("a", prompt_bytes(&m, 1)).unwrap(), 1);
            assert_eq!(reg.put_prompt("a", prompt_bytes(&m, 2)).unwrap(), 2);
            reg.set_default_strategy("a", Strategy::RaIcl).unwrap();
        }
        let mem = dir.path().join("users/a/memory.jsonl");
        let mut f = OpenOptions::new().append(true).open(&mem).unwrap();
        f.write_all(b"{\"abbreviation\":\"x").unwrap();
        drop(f);

        let reg = Registry::open(dir.path(), &m).unwrap();
        let p = reg.get("a").unwrap();
        let p = p.read().unwrap();
        assert_eq!(p.memory.len(), 2);
        assert_eq!(p.default_strategy, Strategy::RaIcl);
        assert_eq!(p.soft_prompt.as_ref().unwrap().version, 2);
        assert_eq!(p.prompt_history, vec![1, 2]);
        assert_eq!(*p.soft_prompt.as_ref().unwrap().bytes, prompt_bytes(&m, 2));
        assert!(dir.path().join("users/a/prompts/v0001.bin").exists());
        assert!(fs::read_to_string(&mem).unwrap().ends_with('\n'));
        let ts: Vec<u64> = p.memory_records().iter().map(|r| r.timestamp).collect();
        assert!(ts[0] < ts[1]);
    }

    #[test]
    fn rejects_prompt_for_other_base() {
        let m = tiny();
        let other = Model::init(m.config().clone(), 4).unwrap();
        let reg = Registry::ephemeral(&m);
        let err = reg.put_prompt("a", prompt_bytes(&other, 1)).unwrap_err();
        assert!(matches!(err, AppError::BaseMismatch { .. }));
        assert!(reg.prompt_bytes("a").is_none());
    }
}
