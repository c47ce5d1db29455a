//! Toy models and their training loops.
//!
//! Forward passes are recorded on a small reverse-mode tape so the composite
//! loss (cross-entropy plus the similarity regularizers) can be
//! differentiated through reuse sites. Gradients pass straight through the
//! cluster assignment and exactly through the centroid averaging.

mod model;
mod tape;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::HasherConfig;
use crate::stream::FrameStream;
use crate::tensor::{cosine_similarity, read_matrix, write_matrix, DenseMatrix, Real};

pub use model::{
    ArchSpec, Architecture, ToyModel, CONV1_FILTERS, CONV2_FILTERS, D_FF, D_MODEL, HEADS, PATCH,
};
pub use train::{
    calibrate, composite_loss, evaluate, pretrain, sa_train, ClusterPlan, EpochReport, EvalOptions,
    Evaluation, RegState, TrainConfig, TrainOutcome,
};

use model::{forward, Clusterer, ForwardOptions};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RFCK1";

// Upper bound on the JSON header, checked before allocating.
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: ArchSpec,
    hashers: Vec<HasherConfig>,
    /// Hash of the configuration that produced the checkpoint, if any.
    config_hash: Option<String>,
    n_params: usize,
}

/// A model plus the hash of the configuration it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub config_hash: Option<String>,
}

/// `RFCK1` layout: magic, `u32` little-endian header length, JSON header
/// (architecture, hashers, config hash, parameter count), then each
/// parameter as an `RFM1` matrix in [`ArchSpec::param_shapes`] order.
pub fn write_checkpoint<W: Write>(out: &mut W, ck: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        spec: *ck.model.spec(),
        hashers: ck.model.hasher_configs(),
        config_hash: ck.config_hash.clone(),
        n_params: ck.model.params().len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format {
        kind: "RFCK1",
        reason: e.to_string(),
    })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for p in ck.model.params() {
        write_matrix(out, p)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Format {
        kind: "RFCK1",
        reason,
    };
    let mut magic = [0u8; 5];
    input
        .read_exact(&mut magic)
        .map_err(|e| bad(format!("cannot read magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    input
        .read_exact(&mut len)
        .map_err(|e| bad(format!("cannot read header length: {e}")))?;
    let len = u32::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(bad(format!("header of {len} bytes")));
    }
    let mut json = vec![0u8; len as usize];
    input
        .read_exact(&mut json)
        .map_err(|_| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.n_params != header.spec.param_shapes().len() {
        return Err(bad(format!(
            "{} parameters recorded, architecture has {}",
            header.n_params,
            header.spec.param_shapes().len()
        )));
    }
    let params = (0..header.n_params)
        .map(|_| read_matrix(input))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model: ToyModel::from_parts(header.spec, params, &header.hashers)?,
        config_hash: header.config_hash,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Input rows of every reuse layer for frames `range` of `stream`, from an
/// exact forward pass. Frames are stacked; attention layers list each
/// frame's rows in turn.
pub fn layer_inputs(
    model: &ToyModel,
    stream: &FrameStream,
    range: std::ops::Range<usize>,
) -> Result<Vec<DenseMatrix>> {
    let s = model.spec();
    if stream.shape() != (s.height, s.width, s.channels) {
        return Err(Error::config("stream frames do not match the model"));
    }
    if range.is_empty() || range.end > stream.n_frames() {
        return Err(Error::arg(format!(
            "frame range {range:?} outside a stream of {}",
            stream.n_frames()
        )));
    }
    let n = range.len();
    let frames = &stream.data()[range.start * stream.frame_len()..range.end * stream.frame_len()];
    let f = forward::<f32>(
        model,
        model.params(),
        model.batch_input(frames, n)?,
        n,
        &mut Clusterer::Exact,
        ForwardOptions::default(),
    )?;
    Ok(f.layer_inputs
        .iter()
        .map(|&id| f.tape.value(id).clone())
        .collect())
}

/// Mean pairwise cosine similarity of the input rows of every reuse layer,
/// from an exact forward pass, averaged over frames. Layers that see a single
/// row per frame (the classifier) are measured across frames instead. Pairs
/// with a zero row are skipped; a layer with no usable pair reports 1.
pub fn layer_similarity_profile(model: &ToyModel, stream: &FrameStream) -> Result<Vec<f64>> {
    let s = model.spec();
    if stream.shape() != (s.height, s.width, s.channels) {
        return Err(Error::config("stream frames do not match the model"));
    }
    let n = stream.n_frames();
    if n == 0 {
        return Err(Error::arg("empty stream"));
    }
    let n_layers = s.layer_names().len();
    let mut per_frame = vec![(0.0f64, 0usize); n_layers];
    let mut single_rows: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n_layers];
    const CHUNK: usize = 16;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let frames = &stream.data()[start * stream.frame_len()..end * stream.frame_len()];
        let f = forward::<f32>(
            model,
            model.params(),
            model.batch_input(frames, end - start)?,
            end - start,
            &mut Clusterer::Exact,
            ForwardOptions::default(),
        )?;
        for (l, &id) in f.layer_inputs.iter().enumerate() {
            let v = f.tape.value(id);
            let per = v.rows() / (end - start);
            for k in 0..end - start {
                if per == 1 {
                    single_rows[l].push(v.row(k).to_vec());
                } else {
                    let rows: Vec<&[f32]> = (k * per..(k + 1) * per).map(|i| v.row(i)).collect();
                    let (sum, cnt) = &mut per_frame[l];
                    *sum += mean_pairwise_cosine(&rows)?;
                    *cnt += 1;
                }
            }
        }
    }
    (0..n_layers)
        .map(|l| {
            if single_rows[l].is_empty() {
                let (sum, cnt) = per_frame[l];
                Ok(sum / cnt as f64)
            } else {
                let rows: Vec<&[f32]> = single_rows[l].iter().map(Vec::as_slice).collect();
                mean_pairwise_cosine(&rows)
            }
        })
        .collect()
}

fn mean_pairwise_cosine<T: Real>(rows: &[&[T]]) -> Result<f64> {
    let nonzero: Vec<&[T]> = rows
        .iter()
        .copied()
        .filter(|r| r.iter().any(|v| *v != T::zero()))
        .collect();
    let (mut sum, mut cnt) = (0.0, 0usize);
    for i in 0..nonzero.len() {
        for j in i + 1..nonzero.len() {
            sum += cosine_similarity(nonzero[i], nonzero[j])?;
            cnt += 1;
        }
    }
    Ok(if cnt == 0 { 1.0 } else { sum / cnt as f64 })
}
