use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use mmca::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run: the command, its fully resolved config,
/// the inputs with their hashes and the seed. Output hashes are filled in
/// when the run finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub created_utc: String,
    pub seed: u64,
    /// Subcommand-specific options such as `variant` or `keep_fractions`.
    #[serde(default)]
    pub options: serde_json::Value,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    #[serde(default)]
    pub outputs: Vec<Artifact>,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub completed: bool,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(subcommand: &str, config: RunConfig, options: serde_json::Value, run_dir: PathBuf) -> Self {
        Self {
            subcommand: subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created_utc: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            seed: config.seed(),
            options,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            run_dir,
            completed: false,
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(Artifact { role: role.into(), path: path.to_path_buf(), sha256: sha256_file(path)? });
        Ok(())
    }

    pub fn input(&self, role: &str) -> Option<&Path> {
        self.inputs.iter().find(|a| a.role == role).map(|a| a.path.as_path())
    }

    pub fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(self.run_dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Hash every regular file in the run directory except the manifest and
    /// mark the run complete.
    pub fn finish(&mut self) -> Result<()> {
        let mut files: Vec<PathBuf> = Vec::new();
        collect_files(&self.run_dir, &mut files)?;
        files.sort();
        self.outputs.clear();
        for f in files {
            if f.file_name().is_some_and(|n| n == MANIFEST_FILE) && f.parent() == Some(self.run_dir.as_path()) {
                continue;
            }
            let rel = f.strip_prefix(&self.run_dir).unwrap_or(&f).to_path_buf();
            self.outputs.push(Artifact { role: "output".into(), sha256: sha256_file(&f)?, path: rel });
        }
        self.completed = true;
        self.write()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Create `<out>/<UTC timestamp>-s<seed>`, suffixing `-2`, `-3`, ... when
/// that name is taken.
pub fn create_run_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-s{seed}");
    for k in 1.. {
        let name = if k == 1 { base.clone() } else { format!("{base}-{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}
