//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"AGCYCKPT"
//! u32     schema version
//! u64     header length in bytes
//! header  JSON: schema_version, dtype, step, config, weights, opt_t,
//!         content_hash (sha256 hex of the blob section), and a blob table
//!         [{name, shape, offset, len}] with offsets/lengths in elements
//! blobs   concatenated parameter values, little-endian
//! ```
//!
//! Blob names mirror the parameter visit order (`gp.*`, `gr.*`, `dp.*`,
//! `dr.*`) plus optimizer moments (`opt.<net>.m.<i>` / `opt.<net>.v.<i>`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{Adam, Scalar};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AGCYCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob section, in elements.
    offset: usize,
    /// Length in elements.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    dtype: String,
    step: u64,
    config: TrainConfig,
    weights: Option<LossWeights>,
    opt_t: BTreeMap<String, u64>,
    content_hash: String,
    blobs: Vec<BlobEntry>,
}

fn le_bytes<T: Scalar>(values: &[T], out: &mut Vec<u8>) {
    for &v in values {
        if std::mem::size_of::<T>() == 4 {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn from_le_bytes<T: Scalar>(bytes: &[u8], len: usize) -> Vec<T> {
    let sz = std::mem::size_of::<T>();
    (0..len)
        .map(|i| {
            let b = &bytes[i * sz..(i + 1) * sz];
            if sz == 4 {
                T::of_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            } else {
                T::of_f64(f64::from_le_bytes(b.try_into().expect("8 bytes")))
            }
        })
        .collect()
}

struct BlobWriter<T: Scalar> {
    entries: Vec<BlobEntry>,
    data: Vec<u8>,
    offset: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> BlobWriter<T> {
    fn new() -> Self {
        BlobWriter {
            entries: Vec::new(),
            data: Vec::new(),
            offset: 0,
            _marker: std::marker::PhantomData,
        }
    }

    fn push(&mut self, name: String, shape: &[usize], values: &[T]) {
        le_bytes(values, &mut self.data);
        self.entries.push(BlobEntry {
            name,
            shape: shape.to_vec(),
            offset: self.offset,
            len: values.len(),
        });
        self.offset += values.len();
    }
}

fn push_adam<T: Scalar>(w: &mut BlobWriter<T>, name: &str, opt: &Adam<T>) {
    for (i, m) in opt.m.iter().enumerate() {
        w.push(
            format!("opt.{name}.m.{i}"),
            m.shape(),
            m.as_slice().expect("contiguous"),
        );
    }
    for (i, v) in opt.v.iter().enumerate() {
        w.push(
            format!("opt.{name}.v.{i}"),
            v.shape(),
            v.as_slice().expect("contiguous"),
        );
    }
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut w = BlobWriter::<T>::new();
    for (prefix, net) in [("gp", &state.g_p), ("gr", &state.g_r)] {
        let mut params = Vec::new();
        net.visit(&mut params);
        for (name, arr) in params {
            w.push(
                format!("{prefix}.{name}"),
                arr.shape(),
                arr.as_slice().expect("contiguous"),
            );
        }
    }
    for (prefix, net) in [("dp", &state.d_p), ("dr", &state.d_r)] {
        let mut params = Vec::new();
        net.visit(&mut params);
        for (name, arr) in params {
            w.push(
                format!("{prefix}.{name}"),
                arr.shape(),
                arr.as_slice().expect("contiguous"),
            );
        }
    }
    push_adam(&mut w, "gp", &state.opt_gp);
    push_adam(&mut w, "gr", &state.opt_gr);
    push_adam(&mut w, "dp", &state.opt_dp);
    push_adam(&mut w, "dr", &state.opt_dr);

    let mut hasher = Sha256::new();
    hasher.update(&w.data);
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        dtype: T::DTYPE.to_string(),
        step: state.step,
        config: state.config.clone(),
        weights: state.weights,
        opt_t: BTreeMap::from([
            ("gp".to_string(), state.opt_gp.t),
            ("gr".to_string(), state.opt_gr.t),
            ("dp".to_string(), state.opt_dp.t),
            ("dr".to_string(), state.opt_dr.t),
        ]),
        content_hash: format!("{:x}", hasher.finalize()),
        blobs: w.entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    file.write_all(&w.data).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {version}, expected {CHECKPOINT_SCHEMA_VERSION}"
        )));
    }
    let mut hlen = [0u8; 8];
    file.read_exact(&mut hlen).map_err(|e| Error::io(path, e))?;
    let hlen = u64::from_le_bytes(hlen) as usize;
    let mut header_bytes = vec![0u8; hlen];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;

    let mut hasher = Sha256::new();
    hasher.update(&data);
    let hash = format!("{:x}", hasher.finalize());
    if hash != header.content_hash {
        return Err(Error::Checkpoint(
            "content hash mismatch; checkpoint is corrupt".into(),
        ));
    }

    let sz = std::mem::size_of::<T>();
    let mut blobs: BTreeMap<String, (Vec<usize>, Vec<T>)> = BTreeMap::new();
    for b in &header.blobs {
        let start = b.offset * sz;
        let end = start + b.len * sz;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "blob {} extends past the end of the file",
                b.name
            )));
        }
        blobs.insert(
            b.name.clone(),
            (b.shape.clone(), from_le_bytes(&data[start..end], b.len)),
        );
    }

    let mut state: TrainState<T> = TrainState::init(&header.config)?;
    state.step = header.step;
    state.weights = header.weights;

    {
        let assign = |prefix: &str, params: Vec<(String, ndarray::ArrayViewMutD<T>)>| -> Result<()> {
            for (name, mut view) in params {
                let key = format!("{prefix}.{name}");
                let (shape, values) = blobs
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing blob {key}")))?;
                if view.shape() != shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "blob {key} shape {shape:?} does not match parameter {:?}",
                        view.shape()
                    )));
                }
                for (dst, &src) in view
                    .as_slice_mut()
                    .expect("contiguous param")
                    .iter_mut()
                    .zip(values.iter())
                {
                    *dst = src;
                }
            }
            Ok(())
        };
        let mut p = Vec::new();
        state.g_p.visit_mut(&mut p);
        assign("gp", p)?;
        let mut p = Vec::new();
        state.g_r.visit_mut(&mut p);
        assign("gr", p)?;
        let mut p = Vec::new();
        state.d_p.visit_mut(&mut p);
        assign("dp", p)?;
        let mut p = Vec::new();
        state.d_r.visit_mut(&mut p);
        assign("dr", p)?;
    }

    let load_adam = |opt: &mut Adam<T>, name: &str| -> Result<()> {
        opt.t = *header
            .opt_t
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step for {name}")))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for i in 0.. {
            let mk = format!("opt.{name}.m.{i}");
            let vk = format!("opt.{name}.v.{i}");
            match (blobs.get(&mk), blobs.get(&vk)) {
                (Some((ms, mv)), Some((vs, vv))) => {
                    m.push(
                        ArrayD::from_shape_vec(ndarray::IxDyn(ms), mv.clone())
                            .map_err(|e| Error::Checkpoint(format!("blob {mk}: {e}")))?,
                    );
                    v.push(
                        ArrayD::from_shape_vec(ndarray::IxDyn(vs), vv.clone())
                            .map_err(|e| Error::Checkpoint(format!("blob {vk}: {e}")))?,
                    );
                }
                (None, None) => break,
                _ => return Err(Error::Checkpoint(format!("optimizer blobs for {name} are inconsistent"))),
            }
        }
        opt.m = m;
        opt.v = v;
        Ok(())
    };
    load_adam(&mut state.opt_gp, "gp")?;
    load_adam(&mut state.opt_gr, "gr")?;
    load_adam(&mut state.opt_dp, "dp")?;
    load_adam(&mut state.opt_dr, "dr")?;

    Ok(state)
}
