//! Checkpoint container: a named map of tensors in the "OFST" tensor
//! format, wrapped by an "OFSC" header. Holds every parameter and momentum
//! buffer plus, for learned-size layers, the size state
//! (k, k_minus, k_plus, alpha, clamp range).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ofsnet::data::{read_tensor, write_tensor};
use ofsnet::error::{Error, Result};
use ofsnet::network::{Layer, Network};
use ofsnet::ofs::OfsConvLayer;
use ofsnet::tensor::{FilterBank, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"OFSC";
const CHECKPOINT_VERSION: u16 = 1;

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn write_checkpoint(path: &Path, entries: &TensorMap) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        write_tensor(&mut buf, tensor)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path)?;
    let mut cur: &[u8] = &bytes;
    let take = |cur: &mut &[u8], n: usize, what: &str| -> Result<Vec<u8>> {
        if cur.len() < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let (head, rest) = cur.split_at(n);
        *cur = rest;
        Ok(head.to_vec())
    };

    let magic = take(&mut cur, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "checkpoint magic mismatch: expected {CHECKPOINT_MAGIC:?}, found {magic:?}"
        )));
    }
    let version = u16::from_le_bytes(take(&mut cur, 2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4, "entry count")?.try_into().unwrap());
    let mut entries = TensorMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2, "entry name length")?.try_into().unwrap());
        let name = String::from_utf8(take(&mut cur, name_len as usize, "entry name")?)
            .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
        let tensor = read_tensor(&mut cur)?;
        entries.insert(name, tensor);
    }
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last checkpoint entry",
            cur.len()
        )));
    }
    Ok(entries)
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor {
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

/// Snapshot every parameter of the network into a named-tensor map.
pub fn network_state(net: &Network) -> TensorMap {
    let mut map = TensorMap::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let key = |field: &str| format!("layer{i}.{field}");
        match layer {
            Layer::OfsConv(l) => {
                map.insert(key("k"), Tensor::scalar(l.size().k()));
                map.insert(key("k_minus"), Tensor::scalar(l.size().k_minus() as f64));
                map.insert(key("k_plus"), Tensor::scalar(l.size().k_plus() as f64));
                map.insert(key("alpha"), Tensor::scalar(l.size().alpha()));
                let (lo, hi) = l.clamp_range();
                map.insert(key("k_min_clamp"), Tensor::scalar(lo));
                map.insert(key("k_max_clamp"), Tensor::scalar(hi));
                map.insert(key("upper_filters"), l.upper().weights.clone());
                map.insert(key("bias"), vec_tensor(l.bias()));
                map.insert(key("momentum_filters"), l.momentum_filters().clone());
                map.insert(key("momentum_bias"), vec_tensor(l.momentum_bias()));
                map.insert(key("momentum_size"), Tensor::scalar(l.momentum_size()));
            }
            Layer::Conv(l) => {
                map.insert(key("filters"), l.filters.weights.clone());
                map.insert(key("bias"), vec_tensor(&l.bias));
                map.insert(key("momentum_filters"), l.momentum_filters.clone());
                map.insert(key("momentum_bias"), vec_tensor(&l.momentum_bias));
            }
            Layer::Linear(l) => {
                map.insert(key("weights"), l.weights.clone());
                map.insert(key("bias"), vec_tensor(&l.bias));
                map.insert(key("momentum_weights"), l.momentum_weights.clone());
                map.insert(key("momentum_bias"), vec_tensor(&l.momentum_bias));
            }
            Layer::Relu { .. } | Layer::Pool { .. } | Layer::Flatten { .. } => {}
        }
    }
    map
}

fn fetch<'a>(map: &'a TensorMap, name: &str) -> Result<&'a Tensor> {
    map.get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing entry {name}")))
}

fn fetch_scalar(map: &TensorMap, name: &str) -> Result<f64> {
    let t = fetch(map, name)?;
    if t.numel() != 1 {
        return Err(Error::Format(format!("checkpoint entry {name} is not a scalar")));
    }
    Ok(t.data[0])
}

/// Restore a network (already built from its spec) from a checkpoint map.
pub fn restore_network(net: &mut Network, map: &TensorMap) -> Result<()> {
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let key = |field: &str| format!("layer{i}.{field}");
        match layer {
            Layer::OfsConv(l) => {
                let weights = fetch(map, &key("upper_filters"))?.clone();
                let (out_c, in_c) = (weights.shape[0], weights.shape[1]);
                let size = weights.shape[2];
                let bank = FilterBank::new(out_c, in_c, size, weights)?;
                let restored = OfsConvLayer::from_state(
                    bank,
                    fetch(map, &key("bias"))?.data.clone(),
                    fetch_scalar(map, &key("k"))?,
                    fetch_scalar(map, &key("k_min_clamp"))?,
                    fetch_scalar(map, &key("k_max_clamp"))?,
                    fetch(map, &key("momentum_filters"))?.clone(),
                    fetch(map, &key("momentum_bias"))?.data.clone(),
                    fetch_scalar(map, &key("momentum_size"))?,
                )?;
                if restored.in_channels() != l.in_channels()
                    || restored.out_channels() != l.out_channels()
                {
                    return Err(Error::Format(format!(
                        "checkpoint layer {i} channel counts do not match the network spec"
                    )));
                }
                *l = restored;
            }
            Layer::Conv(l) => {
                let weights = fetch(map, &key("filters"))?.clone();
                if weights.shape != l.filters.weights.shape {
                    return Err(Error::Format(format!(
                        "checkpoint layer {i} filter shape {:?} does not match {:?}",
                        weights.shape, l.filters.weights.shape
                    )));
                }
                l.filters.weights = weights;
                l.bias = fetch(map, &key("bias"))?.data.clone();
                l.momentum_filters = fetch(map, &key("momentum_filters"))?.clone();
                l.momentum_bias = fetch(map, &key("momentum_bias"))?.data.clone();
            }
            Layer::Linear(l) => {
                let weights = fetch(map, &key("weights"))?.clone();
                if weights.shape != l.weights.shape {
                    return Err(Error::Format(format!(
                        "checkpoint layer {i} weight shape {:?} does not match {:?}",
                        weights.shape, l.weights.shape
                    )));
                }
                l.weights = weights;
                l.bias = fetch(map, &key("bias"))?.data.clone();
                l.momentum_weights = fetch(map, &key("momentum_weights"))?.clone();
                l.momentum_bias = fetch(map, &key("momentum_bias"))?.data.clone();
            }
            Layer::Relu { .. } | Layer::Pool { .. } | Layer::Flatten { .. } => {}
        }
    }
    Ok(())
}
