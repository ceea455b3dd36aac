//! Checkpoint archive: a little-endian u64 header length, a JSON header
//! listing the config, vocabulary and each tensor's name/shape/offset, then
//! the raw little-endian f64 payloads. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

use super::{param_specs, EncoderConfig, EncoderModel, Vocab};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
}

/// Optimizer/loop state stored alongside the model in training checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainerMeta {
    pub stage: String,
    pub step: u64,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainer: Option<TrainerMeta>,
}

/// Write an archive of named tensors. Order is preserved.
pub fn save_archive(
    path: &Path,
    config: &EncoderConfig,
    vocab: &Vocab,
    tensors: &IndexMap<String, Tensor>,
    trainer: Option<&TrainerMeta>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() as u64;
    }
    let header = Header {
        config: config.clone(),
        vocab: vocab.tokens().to_vec(),
        tensors: entries,
        trainer: trainer.cloned(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in tensors.values() {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an archive back. Tensor order matches the header.
pub fn load_archive(
    path: &Path,
) -> Result<(EncoderConfig, Vocab, IndexMap<String, Tensor>, Option<TrainerMeta>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Input(format!(
            "archive payload length {} is not a multiple of 8",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();

    let mut tensors = IndexMap::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel;
        if end > values.len() {
            return Err(Error::Input(format!(
                "tensor {} extends past the payload ({} > {})",
                entry.name,
                end,
                values.len()
            )));
        }
        let t = Tensor::new(entry.shape.clone(), values[start..end].to_vec())?.with_grad();
        tensors.insert(entry.name.clone(), t);
    }
    Ok((header.config, Vocab::from_tokens(header.vocab), tensors, header.trainer))
}

pub fn save_model(path: &Path, model: &EncoderModel) -> Result<()> {
    save_archive(path, &model.config, &model.vocab, &model.params, None)
}

/// Load a model checkpoint, validating the parameter set against the config.
pub fn load_model(path: &Path) -> Result<EncoderModel> {
    let (config, vocab, tensors, _) = load_archive(path)?;
    config.validate()?;
    let model = EncoderModel { config, vocab, params: tensors };
    for (name, shape) in param_specs(&model.config) {
        match model.params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Input(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            None => {
                return Err(Error::Input(format!("checkpoint is missing tensor {name}")));
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LayerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let corpus = ["alpha beta gamma", "delta epsilon zeta eta"];
        let vocab = Vocab::build(corpus, 24).unwrap();
        let config = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_dim: 12,
            max_seq_len: 16,
            rope_base: 10_000.0,
            layer_kinds: vec![LayerKind::Dense, LayerKind::Moe { experts: 2, top_k: 1 }],
            output_dims: vec![8, 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = EncoderModel::init(config, vocab, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();

        assert_eq!(loaded.params.len(), model.params.len());
        for (name, t) in &model.params {
            let l = &loaded.params[name];
            assert_eq!(l.shape(), t.shape());
            // Bit-exact comparison.
            for (a, b) in t.data().iter().zip(l.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} drifted");
            }
        }
        assert_eq!(loaded.vocab.tokens(), model.vocab.tokens());
    }

    #[test]
    fn trainer_meta_survives_round_trip() {
        let vocab = Vocab::build(["a b c"], 16).unwrap();
        let config = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 8,
            max_seq_len: 8,
            rope_base: 10_000.0,
            layer_kinds: vec![LayerKind::Dense],
            output_dims: vec![8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = EncoderModel::init(config, vocab, &mut rng).unwrap();
        let meta = TrainerMeta {
            stage: "contrastive_pretrain".into(),
            step: 17,
            seed: 5,
            loss_history: vec![2.5, 2.25, 2.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_archive(&path, &model.config, &model.vocab, &model.params, Some(&meta)).unwrap();
        let (_, _, _, loaded_meta) = load_archive(&path).unwrap();
        assert_eq!(loaded_meta.unwrap(), meta);
    }
}
