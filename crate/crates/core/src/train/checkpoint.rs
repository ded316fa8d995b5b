//! Model checkpoints: a directory holding the parameters as little-endian
//! `f64`, a manifest, the model configuration, the vocabulary and the entity
//! rows.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::Vocab;
use crate::kv::{KvError, KvFile};
use crate::model::{Model, ModelConfig, ModelError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub vocab: Vocab,
    /// Entity ids by row; row 0 is padding.
    pub entities: Vec<String>,
    /// Free-form `key=value` run settings stored next to the model.
    pub run_config: String,
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), CheckpointError> {
    fs::write(&path, bytes).map_err(|source| CheckpointError::Io { path, source })
}

fn read(path: PathBuf) -> Result<Vec<u8>, CheckpointError> {
    fs::read(&path).map_err(|source| CheckpointError::Io { path, source })
}

fn read_text(path: PathBuf) -> Result<String, CheckpointError> {
    String::from_utf8(read(path.clone())?).map_err(|_| CheckpointError::Format(format!("{} is not UTF-8", path.display())))
}

pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    model: &Model<S>,
    vocab: &Vocab,
    entities: &[String],
    run_config: &str,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = String::new();
    let mut bytes = Vec::new();
    for (_, name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", dims.join("x"), bytes.len() / 8));
        for &x in t.data() {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    write(dir.join("params.bin"), &bytes)?;
    write(dir.join("manifest.txt"), manifest.as_bytes())?;
    write(dir.join("config.txt"), model.config.to_kv().to_text().as_bytes())?;
    write(dir.join("vocab.txt"), vocab.to_text().as_bytes())?;
    let ents: String = entities.iter().skip(1).map(|e| format!("{e}\n")).collect();
    write(dir.join("entities.txt"), ents.as_bytes())?;
    write(dir.join("run.txt"), run_config.as_bytes())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<Checkpoint<S>, CheckpointError> {
    let bad = |m: String| CheckpointError::Format(m);
    let kv = KvFile::parse(&read_text(dir.join("config.txt"))?, &ModelConfig::KEYS)?;
    let mut config = ModelConfig::default();
    config.apply_kv(&kv)?;
    let mut model = Model::<S>::new(config, 0)?;
    let bytes = read(dir.join("params.bin"))?;
    if bytes.len() % 8 != 0 {
        return Err(bad("params.bin length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let manifest = read_text(dir.join("manifest.txt"))?;
    let mut seen = 0;
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset] = cols[..] else {
            return Err(bad(format!("manifest line `{line}`")));
        };
        let shape: Vec<usize> = dims
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad(format!("shape `{dims}`")))?;
        let offset: usize = offset.parse().map_err(|_| bad(format!("offset `{offset}`")))?;
        let id = model.params.id(name).ok_or_else(|| bad(format!("unexpected parameter `{name}`")))?;
        let t = model.params.get_mut(id);
        if t.shape() != shape.as_slice() {
            return Err(bad(format!("`{name}` has shape {shape:?}, model expects {:?}", t.shape())));
        }
        let n = t.numel();
        let src = values
            .get(offset..offset + n)
            .ok_or_else(|| bad(format!("`{name}` runs past the end of params.bin")))?;
        for (d, &x) in t.data_mut().iter_mut().zip(src) {
            *d = S::lit(x);
        }
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(bad(format!("manifest lists {seen} of {} parameters", model.params.len())));
    }
    let vocab = Vocab::from_text(&read_text(dir.join("vocab.txt"))?).ok_or_else(|| bad("vocab.txt header".into()))?;
    let mut entities = vec![String::new()];
    entities.extend(read_text(dir.join("entities.txt"))?.lines().map(str::to_string));
    let run_config = read_text(dir.join("run.txt"))?;
    Ok(Checkpoint {
        model,
        vocab,
        entities,
        run_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_config;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f64>::new(toy_config(), 3).unwrap();
        let mut vocab = Vocab::new();
        vocab.insert("hello");
        let ents = vec![String::new(), "Q1".into(), "Q2".into()];
        save_checkpoint(dir.path(), &model, &vocab, &ents, "seed=3\n").unwrap();
        let back = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(back.model.config, model.config);
        for ((_, n1, a), (_, n2, b)) in model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.data(), b.data());
            assert_eq!(a.requires_grad(), b.requires_grad());
        }
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.entities, ents);
        assert_eq!(back.run_config, "seed=3\n");
    }

    #[test]
    fn truncated_params_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f64>::new(toy_config(), 3).unwrap();
        save_checkpoint(dir.path(), &model, &Vocab::new(), &[String::new()], "").unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(CheckpointError::Format(_))));
    }
}
