//! Checkpoint file format: one JSON header line (config, role, vocab hashes,
//! seed, tensor order), then raw little-endian 32-bit float payloads in the
//! header-declared order.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::neural::params::{Layout, ModelConfig, ModelParams, ModelRole};
use crate::neural::NeuralError;
use crate::tensor::Matrix;

const FORMAT: &str = "docaug-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct TensorDecl {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    role: ModelRole,
    seed: u64,
    src_vocab_sha256: String,
    tgt_vocab_sha256: String,
    config: ModelConfig,
    tensors: Vec<TensorDecl>,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), NeuralError> {
    let header = Header {
        format: FORMAT.to_string(),
        role: params.role,
        seed: params.seed,
        src_vocab_sha256: params.src_vocab_sha256.clone(),
        tgt_vocab_sha256: params.tgt_vocab_sha256.clone(),
        config: params.config.clone(),
        tensors: params
            .layout
            .names
            .iter()
            .zip(&params.layout.shapes)
            .map(|(name, &(rows, cols))| TensorDecl { name: name.clone(), rows, cols })
            .collect(),
    };
    let mut file = fs::File::create(path)?;
    let header_json =
        serde_json::to_string(&header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    file.write_all(header_json.as_bytes())?;
    file.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(
        params.layout.shapes.iter().map(|&(r, c)| r * c * 4).sum::<usize>(),
    );
    for tensor in &params.tensors {
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, NeuralError> {
    let file = fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte).map_err(|_| {
            NeuralError::Checkpoint("missing header line".to_string())
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| NeuralError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(NeuralError::Checkpoint(format!(
            "unsupported format {}",
            header.format
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| NeuralError::Checkpoint(format!("bad config: {e}")))?;
    let layout = Layout::new(&header.config);
    if layout.names.len() != header.tensors.len() {
        return Err(NeuralError::Checkpoint(
            "tensor list does not match config layout".to_string(),
        ));
    }
    for (t, decl) in header.tensors.iter().enumerate() {
        if layout.names[t] != decl.name || layout.shapes[t] != (decl.rows, decl.cols) {
            return Err(NeuralError::Checkpoint(format!(
                "tensor {t} mismatch: header {}({}x{}), layout {}({}x{})",
                decl.name, decl.rows, decl.cols, layout.names[t], layout.shapes[t].0,
                layout.shapes[t].1
            )));
        }
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for decl in &header.tensors {
        let count = decl.rows * decl.cols;
        let mut buf = vec![0u8; count * 4];
        reader.read_exact(&mut buf).map_err(|_| {
            NeuralError::Checkpoint(format!("truncated payload for {}", decl.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push(Matrix::from_vec(decl.rows, decl.cols, data));
    }
    let params = ModelParams {
        config: header.config,
        role: header.role,
        seed: header.seed,
        src_vocab_sha256: header.src_vocab_sha256,
        tgt_vocab_sha256: header.tgt_vocab_sha256,
        layout,
        tensors,
    };
    if !params.all_finite() {
        return Err(NeuralError::Checkpoint("non-finite tensor payload".to_string()));
    }
    Ok(params)
}
