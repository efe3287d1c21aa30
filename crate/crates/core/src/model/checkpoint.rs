//! Bit-exact checkpoint format.
//!
//! Layout: magic `PLMA`, little-endian `u32` version (1), little-endian
//! `u64` header length, a UTF-8 JSON header (encoder config, run config,
//! lab catalog, optional embedded tokenizer, tensor manifest), then the raw
//! little-endian IEEE-754 arrays concatenated in manifest order. Files are
//! written atomically (temp file + rename) so concurrent readers never see
//! partial state.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::BpeModel;
use crate::config::{EncoderConfig, RunConfig};
use crate::data::LabCatalog;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

use super::{AttributionModel, ConvStack, ParamArray};

const MAGIC: &[u8; 4] = b"PLMA";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    #[serde(default)]
    run_config: Option<RunConfig>,
    /// Lab ids in dense-index order (auxiliary class last).
    labs: Vec<String>,
    /// Embedded tokenizer model file, so a checkpoint is self-contained for
    /// ranking new sequences.
    #[serde(default)]
    bpe_model: Option<String>,
    tensors: Vec<ManifestEntry>,
}

/// Weights at whichever precision the checkpoint was trained in.
pub enum ModelWeights {
    F32(AttributionModel<f32>),
    F64(AttributionModel<f64>),
}

impl ModelWeights {
    pub fn dtype(&self) -> Dtype {
        match self {
            ModelWeights::F32(_) => Dtype::F32,
            ModelWeights::F64(_) => Dtype::F64,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        match self {
            ModelWeights::F32(m) => &m.config,
            ModelWeights::F64(m) => &m.config,
        }
    }
}

pub struct Checkpoint {
    pub model: ModelWeights,
    pub labs: LabCatalog,
    pub bpe: Option<BpeModel>,
    pub run_config: Option<RunConfig>,
}

pub fn save_checkpoint<T: Scalar>(
    model: &AttributionModel<T>,
    labs: &LabCatalog,
    bpe: Option<&BpeModel>,
    run_config: Option<&RunConfig>,
    path: &Path,
) -> Result<()> {
    let entries = model.param_entries();
    let mut tensors = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, p) in &entries {
        tensors.push(ManifestEntry {
            name: name.clone(),
            shape: p.shape.clone(),
            dtype: T::DTYPE,
            offset,
        });
        offset += (p.len() * T::DTYPE.size_bytes()) as u64;
    }
    let header = Header {
        config: model.config.clone(),
        run_config: run_config.cloned(),
        labs: labs.labs().to_vec(),
        bpe_model: bpe.map(BpeModel::to_model_string),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let mut bytes =
        Vec::with_capacity(4 + 4 + 8 + header_json.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, p) in &entries {
        for &v in &p.data {
            v.write_le(&mut bytes);
        }
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| Error::Checkpoint(format!("atomic rename failed: {e}")))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let fail = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));

    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("not a PLMA checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(&format!("bad header JSON: {e}")))?;
    let data = &bytes[16 + header_len..];

    let dtype = header
        .tensors
        .first()
        .map(|t| t.dtype)
        .unwrap_or(Dtype::F32);
    if header.tensors.iter().any(|t| t.dtype != dtype) {
        return Err(fail("mixed tensor dtypes"));
    }

    let labs = LabCatalog::from_labs(header.labs.clone())
        .map_err(|e| fail(&format!("bad lab catalog: {e}")))?;
    let bpe = match &header.bpe_model {
        Some(text) => Some(BpeModel::from_model_string(text)?),
        None => None,
    };

    let model = match dtype {
        Dtype::F32 => ModelWeights::F32(assemble::<f32>(&header, data, path)?),
        Dtype::F64 => ModelWeights::F64(assemble::<f64>(&header, data, path)?),
    };
    Ok(Checkpoint {
        model,
        labs,
        bpe,
        run_config: header.run_config,
    })
}

fn assemble<T: Scalar>(header: &Header, data: &[u8], path: &Path) -> Result<AttributionModel<T>> {
    let fail = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut arrays: Vec<(String, ParamArray<T>)> = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + len * T::DTYPE.size_bytes();
        if end > data.len() {
            return Err(fail(&format!("tensor {} overruns data section", entry.name)));
        }
        let values: Vec<T> = data[start..end]
            .chunks_exact(T::DTYPE.size_bytes())
            .map(T::read_le)
            .collect();
        arrays.push((
            entry.name.clone(),
            ParamArray {
                shape: entry.shape.clone(),
                data: values,
            },
        ));
    }

    let mut take = |name: &str| -> Result<ParamArray<T>> {
        let pos = arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| fail(&format!("missing tensor {name}")))?;
        Ok(arrays.remove(pos).1)
    };

    let config = header.config.clone();
    config.validate()?;
    let token_table = take("token_table")?;
    let mut convs = Vec::with_capacity(config.kernel_sizes.len());
    for &k in &config.kernel_sizes {
        convs.push(ConvStack {
            kernel_size: k,
            kernels: take(&format!("conv{k}.kernels"))?,
            bias: take(&format!("conv{k}.bias"))?,
        });
    }
    let model = AttributionModel {
        token_table,
        convs,
        head_w: take("head.w")?,
        head_b: take("head.b")?,
        lab_table: match config.head {
            crate::config::HeadKind::Triplet => Some(take("lab_table")?),
            crate::config::HeadKind::Softmax => None,
        },
        config,
    };
    if model.config.num_labs != header.labs.len() {
        return Err(fail(&format!(
            "config expects {} labs, catalog has {}",
            model.config.num_labs,
            header.labs.len()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadKind;
    use crate::data::AUXILIARY_LAB;

    fn catalog(n: usize) -> LabCatalog {
        let mut labs: Vec<String> = (0..n - 1).map(|i| format!("lab{i}")).collect();
        labs.push(AUXILIARY_LAB.to_string());
        LabCatalog::from_labs(labs).unwrap()
    }

    fn tiny_config(head: HeadKind) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            token_embed_dim: 4,
            kernel_sizes: vec![1, 2],
            filters_per_kernel: 3,
            metadata_dim: crate::data::METADATA_DIM,
            max_tokens: 30,
            head,
            metric_dim: 6,
            num_labs: 4,
            dropout_rate: 0.1,
        }
    }

    #[test]
    fn checkpoint_round_trips_f32_and_f64() {
        let dir = tempfile::tempdir().unwrap();
        let labs = catalog(4);
        let bpe = BpeModel::train(&["ACGTACGT"], 8).unwrap();

        let m64: AttributionModel<f64> =
            AttributionModel::init(tiny_config(HeadKind::Triplet), 5).unwrap();
        let path64 = dir.path().join("m64.plma");
        save_checkpoint(&m64, &labs, Some(&bpe), None, &path64).unwrap();
        let loaded = load_checkpoint(&path64).unwrap();
        match loaded.model {
            ModelWeights::F64(m) => assert_eq!(m, m64),
            _ => panic!("expected f64 weights"),
        }
        assert_eq!(loaded.labs, labs);
        assert_eq!(loaded.bpe.unwrap(), bpe);

        let m32: AttributionModel<f32> =
            AttributionModel::init(tiny_config(HeadKind::Softmax), 5).unwrap();
        let path32 = dir.path().join("m32.plma");
        save_checkpoint(&m32, &labs, None, Some(&RunConfig::default()), &path32).unwrap();
        let loaded = load_checkpoint(&path32).unwrap();
        match loaded.model {
            ModelWeights::F32(m) => assert_eq!(m, m32),
            _ => panic!("expected f32 weights"),
        }
        assert!(loaded.run_config.is_some());
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let labs = catalog(4);
        let model: AttributionModel<f32> =
            AttributionModel::init(tiny_config(HeadKind::Triplet), 9).unwrap();
        let pa = dir.path().join("a.plma");
        let pb = dir.path().join("b.plma");
        save_checkpoint(&model, &labs, None, None, &pa).unwrap();
        save_checkpoint(&model, &labs, None, None, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        let header = std::fs::read(&pa).unwrap();
        assert_eq!(&header[0..4], b"PLMA");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.plma");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
