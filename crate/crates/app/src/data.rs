//! Prepared-data directories: `train.jsonl`, `val.jsonl`, `test.jsonl` (one
//! example per line), `manifest.json` and optionally `wordlists.json`.

use std::fs;
use std::path::Path;

use abbrex_core::corpus::{AbbrevExample, SplitPolicy, SplitSet};
use abbrex_core::model::Wordlists;
use abbrex_core::CoreError;

use crate::error::{AppError, Result};

const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn write_examples(path: &Path, examples: &[AbbrevExample]) -> Result<()> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<AbbrevExample>> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Invalid(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CoreError::Parse {
                    line: i + 1,
                    message: format!("{}: {e}", path.display()),
                }
                .into()
            })
        })
        .collect()
}

pub fn write_split(dir: &Path, split: &SplitSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, part) in SPLITS.iter().zip([&split.train, &split.val, &split.test]) {
        write_examples(&dir.join(format!("{name}.jsonl")), part)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&split.manifest())?)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<SplitSet> {
    let [train, val, test] = SPLITS.map(|n| read_examples(&dir.join(format!("{n}.jsonl"))));
    let (train, val, test) = (train?, val?, test?);
    let policy = match fs::read(dir.join("manifest.json")) {
        Ok(b) => {
            let v: serde_json::Value = serde_json::from_slice(&b)?;
            serde_json::from_value(v["policy"].clone())?
        }
        Err(_) => SplitPolicy {
            ratios: [0.0; 3],
            dedup_val_test: false,
            max_abbrev_len: None,
            pre_filter: [train.len(), val.len(), test.len()],
        },
    };
    Ok(SplitSet {
        train,
        val,
        test,
        policy,
    })
}

pub fn write_wordlists(dir: &Path, words: &Wordlists) -> Result<()> {
    fs::write(dir.join("wordlists.json"), serde_json::to_vec_pretty(words)?)?;
    Ok(())
}

/// `wordlists.json` from `dir`, or empty lists when absent.
pub fn read_wordlists(path: &Path) -> Result<Wordlists> {
    match fs::read(path) {
        Ok(b) => Ok(serde_json::from_slice(&b)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Wordlists::default()),
        Err(e) => Err(e.into()),
    }
}
