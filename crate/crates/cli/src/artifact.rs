//! On-disk containers and the run manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use knnmt::corpus::{read_tsv, write_tsv};
use knnmt::datastore::{Datastore, IvfIndex};
use knnmt::{ParallelCorpus, RefModel, TextPair, Vocab};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

const BUNDLE_MAGIC: &[u8; 4] = b"KNMB";
const BUNDLE_VERSION: u32 = 1;

/// A model checkpoint together with its vocabulary.
pub struct Bundle {
    pub vocab: Vocab,
    pub model: RefModel,
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| data_err(path, e))
}

pub fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| data_err(path, e))
}

pub fn write_bundle(path: &Path, bundle: &Bundle) -> Result<(), CliError> {
    let mut vocab = Vec::new();
    bundle.vocab.write(&mut vocab)?;
    let mut w = create(path)?;
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    w.write_all(&(vocab.len() as u64).to_le_bytes())?;
    w.write_all(&vocab)?;
    bundle.model.write_checkpoint(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Bundle, CliError> {
    let inner = || -> Result<Bundle, CliError> {
        let mut r = open(path)?;
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[..4] != BUNDLE_MAGIC {
            return Err(CliError::Data("not a model file".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != BUNDLE_VERSION {
            return Err(CliError::Data(format!("unsupported model file version {version}")));
        }
        let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let mut vocab = vec![0u8; len];
        r.read_exact(&mut vocab)?;
        let vocab = Vocab::read(&vocab[..])?;
        let model = RefModel::read_checkpoint(&mut r)?;
        if model.dims().vocab_size != vocab.len() {
            return Err(CliError::Data(format!(
                "model expects {} tokens but its vocabulary has {}",
                model.dims().vocab_size,
                vocab.len()
            )));
        }
        Ok(Bundle { vocab, model })
    };
    inner().map_err(|e| e.in_file(path))
}

/// Datastore followed by a flag byte and, when set, its IVF index.
pub fn write_datastore(path: &Path, ds: &Datastore) -> Result<(), CliError> {
    let mut w = create(path)?;
    ds.write(&mut w)?;
    match ds.index() {
        Some(index) => {
            w.write_all(&[1])?;
            index.write(&mut w)?;
        }
        None => w.write_all(&[0])?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_datastore(path: &Path) -> Result<Datastore, CliError> {
    let inner = || -> Result<Datastore, CliError> {
        let mut r = open(path)?;
        let mut ds = Datastore::read(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if flag[0] == 1 {
            ds.set_index(IvfIndex::read(&mut r)?)?;
        }
        Ok(ds)
    };
    inner().map_err(|e| e.in_file(path))
}

pub fn read_pairs(path: &Path) -> Result<Vec<TextPair>, CliError> {
    read_tsv(open(path)?).map_err(|e| CliError::from(e).in_file(path))
}

pub fn read_corpus(path: &Path, vocab: &Vocab, lang: &str) -> Result<(Vec<TextPair>, ParallelCorpus), CliError> {
    let pairs = read_pairs(path)?;
    let corpus = ParallelCorpus::from_text(&pairs, vocab, lang).map_err(|e| CliError::from(e).in_file(path))?;
    Ok((pairs, corpus))
}

pub fn write_pairs(path: &Path, pairs: &[TextPair]) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_tsv(&mut w, pairs)?;
    w.flush()?;
    Ok(())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    open(path)?
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| data_err(path, e))
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut r = open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut r, &mut hasher).map_err(|e| data_err(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub counts: serde_json::Value,
    pub duration_secs: f64,
}

/// Collects what a command read and wrote, then emits the manifest.
pub struct Run {
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        Run {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes the manifest to `explicit`, else next to the first output,
    /// else to stderr.
    pub fn finish<C: Serialize>(
        self,
        config: &C,
        seed: u64,
        counts: serde_json::Value,
        explicit: Option<&Path>,
    ) -> Result<(), CliError> {
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>, CliError> {
            paths
                .iter()
                .map(|p| Ok(FileDigest { path: p.clone(), sha256: sha256_file(p)? }))
                .collect()
        };
        let manifest = Manifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::Data(e.to_string()))?,
            seed,
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
            counts,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        let target = explicit.map(Path::to_path_buf).or_else(|| {
            self.outputs.first().map(|p| {
                let mut s = p.clone().into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            })
        });
        match target {
            Some(path) => {
                let mut w = create(&path)?;
                writeln!(w, "{text}")?;
                w.flush()?;
            }
            None => eprintln!("{text}"),
        }
        Ok(())
    }
}
