//! Write-once artifact store.
//!
//! Layout under the root:
//!
//! ```text
//! index.jsonl                      one line per completed stage
//! runs/<fingerprint>/.lock         held while a stage writes
//! runs/<fingerprint>/<stage>/      artifacts plus manifest.json
//! ```
//!
//! A stage directory is keyed by the stage fingerprint, which covers its
//! own configuration and the fingerprints of everything upstream. Stage
//! output is written to a scratch directory and renamed into place, so a
//! visible stage directory is always complete.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{canonical_json, json_diff, sha256_hex};

/// Environment variable naming the artifact root.
pub const ROOT_ENV: &str = "RARELAB_HOME";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub upstream: BTreeMap<String, String>,
    /// File name relative to the stage directory -> sha256.
    pub files: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub created_unix: u64,
    pub elapsed_secs: f64,
}

/// Stage fingerprint over its configuration and upstream fingerprints.
pub fn stage_fingerprint(stage: &str, config: &serde_json::Value, upstream: &BTreeMap<String, String>) -> String {
    let doc = serde_json::json!({ "stage": stage, "config": config, "upstream": upstream });
    sha256_hex(canonical_json(&doc).as_bytes())
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let rel = p.strip_prefix(base)?.to_string_lossy().replace('\\', "/");
                if rel != "manifest.json" {
                    out.insert(rel, sha256_hex(&fs::read(&p)?));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Root from `RARELAB_HOME`, else `./rarelab-runs`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("rarelab-runs")))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: &str, fingerprint: &str) -> PathBuf {
        self.root.join("runs").join(fingerprint).join(stage)
    }

    /// Manifest of a completed stage after re-hashing its files.
    pub fn load(&self, stage: &str, fingerprint: &str) -> Result<Option<StageManifest>> {
        let dir = self.stage_dir(stage, fingerprint);
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Ok(None);
        }
        let m: StageManifest = serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("reading {}", path.display()))?;
        if m.fingerprint != fingerprint || m.stage != stage {
            bail!("{}: manifest names {} {}, expected {stage} {fingerprint}", path.display(), m.stage, m.fingerprint);
        }
        let files = hash_tree(&dir)?;
        if files != m.files {
            let changed: Vec<&String> = m
                .files
                .keys()
                .chain(files.keys())
                .filter(|k| m.files.get(*k) != files.get(*k))
                .collect();
            bail!("{stage} artifacts at {} were modified after writing: {changed:?}", dir.display());
        }
        Ok(Some(m))
    }

    /// Check a stored manifest's configuration against the expected one and
    /// name the differing fields.
    pub fn verify_config(m: &StageManifest, expected: &serde_json::Value) -> Result<()> {
        let diff = json_diff(&m.config, expected);
        if !diff.is_empty() {
            bail!("{} fingerprint mismatch; differing fields:\n  {}", m.stage, diff.join("\n  "));
        }
        Ok(())
    }

    /// Run `work` into a fresh stage directory unless a complete one exists.
    /// `work` writes files into the directory it receives and returns the
    /// stage metrics.
    pub fn run_stage(
        &self,
        stage: &str,
        config: serde_json::Value,
        upstream: BTreeMap<String, String>,
        work: impl FnOnce(&Path) -> Result<serde_json::Value>,
    ) -> Result<(StageManifest, PathBuf)> {
        let fp = stage_fingerprint(stage, &config, &upstream);
        let dir = self.stage_dir(stage, &fp);
        if let Some(m) = self.load(stage, &fp)? {
            Self::verify_config(&m, &config)?;
            log::info!("{stage}: reusing {}", dir.display());
            return Ok((m, dir));
        }
        let run_dir = self.root.join("runs").join(&fp);
        fs::create_dir_all(&run_dir)?;
        let lock_path = run_dir.join(".lock");
        let lock = match fs::OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Lock(lock_path)
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is locked by another process (remove {} if stale)", run_dir.display(), lock_path.display())
            }
            Err(e) => return Err(e.into()),
        };
        let scratch = run_dir.join(format!(".{stage}.partial"));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        let t0 = std::time::Instant::now();
        let metrics = work(&scratch).with_context(|| format!("stage {stage}"))?;
        let manifest = StageManifest {
            stage: stage.to_string(),
            fingerprint: fp.clone(),
            config,
            upstream,
            files: hash_tree(&scratch)?,
            metrics,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_secs: t0.elapsed().as_secs_f64(),
        };
        fs::write(scratch.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(&scratch, &dir)?;
        let mut index = fs::OpenOptions::new().create(true).append(true).open(self.root.join("index.jsonl"))?;
        let line = serde_json::json!({
            "stage": stage,
            "fingerprint": fp,
            "upstream": manifest.upstream,
            "created_unix": manifest.created_unix,
            "elapsed_secs": manifest.elapsed_secs,
            "metrics": manifest.metrics,
        });
        writeln!(index, "{line}")?;
        drop(lock);
        Ok((manifest, dir))
    }
}
