//! Binary model checkpoints.
//!
//! Layout, all integers little-endian `u32` unless noted:
//!
//! ```text
//! "CAMB" | version | tensor count
//! per tensor: name length | name (UTF-8) | dtype (u8, 0 = f32) | rank | extents... | payload (f32 LE)
//! metadata length | metadata (UTF-8 `key = value` lines, sorted by key)
//! ```
//!
//! The metadata always carries `image_size` and one `hash.<part>` entry per
//! present model part; loading recomputes every hash and refuses a mismatch.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::parse_entries;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::model::{Arch, Backbone, ConvBlock, DualBranchModel, Head, Part};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAMB";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub const KEY_IMAGE_SIZE: &str = "image_size";
pub const KEY_DATASET: &str = "dataset_fingerprint";
pub const KEY_SEED: &str = "seed";

fn hash_key(part: Part) -> String {
    format!("hash.{}", part.name())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualBranchModel,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: DualBranchModel) -> Self {
        Self {
            model,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn dataset_fingerprint(&self) -> Option<&str> {
        self.metadata.get(KEY_DATASET).map(String::as_str)
    }

    /// Refuse to pair this checkpoint with a dataset it was not trained on.
    pub fn check_dataset(&self, fingerprint: &str) -> Result<()> {
        match self.dataset_fingerprint() {
            Some(expected) if expected != fingerprint => Err(Error::DatasetFingerprint {
                expected: expected.to_string(),
                found: fingerprint.to_string(),
            }),
            _ => Ok(()),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut meta = self.metadata.clone();
        meta.insert(KEY_IMAGE_SIZE.into(), self.model.arch.image_size.to_string());
        for part in Part::ALL {
            meta.remove(&hash_key(part));
            if let Some(h) = self.model.part_hash(part) {
                meta.insert(hash_key(part), h);
            }
        }
        let mut text = String::new();
        for (k, v) in &meta {
            if k.contains(['=', '#', '\n']) || v.contains(['#', '\n']) || k.trim() != k || v.trim() != v {
                return Err(Error::Contract(format!("metadata entry `{k}` cannot be encoded")));
            }
            text.push_str(&format!("{k} = {v}\n"));
        }

        let tensors = self.model.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::format(
                    path,
                    format!("tensor `{name}` has unknown dtype {dtype}"),
                ));
            }
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let t = Tensor::from_le_bytes(shape, payload)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(path, format!("duplicate tensor `{name}`")));
            }
        }
        let meta_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after metadata"));
        }
        let metadata: BTreeMap<String, String> = parse_entries(text)?
            .into_iter()
            .map(|e| (e.key, e.value))
            .collect();

        let model = assemble(tensors, &metadata, path)?;
        for part in Part::ALL {
            let stored = metadata.get(&hash_key(part));
            let actual = model.part_hash(part);
            if stored != actual.as_ref() {
                return Err(Error::HashMismatch {
                    path: path.to_path_buf(),
                    part: part.name().to_string(),
                });
            }
        }
        Ok(Self { model, metadata })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            let eof = std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("checkpoint truncated at byte {}", self.pos),
            );
            return Err(Error::io(self.path, eof));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn assemble(
    mut tensors: BTreeMap<String, Tensor<f32>>,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<DualBranchModel> {
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))
    };
    let mut blocks = Vec::new();
    while let Ok(kernel) = take(&format!("backbone.{}.kernel", blocks.len())) {
        let bias = take(&format!("backbone.{}.bias", blocks.len()))?;
        blocks.push(ConvBlock { kernel, bias });
    }
    if blocks.is_empty() {
        return Err(Error::format(path, "checkpoint has no backbone"));
    }
    let image_size = metadata
        .get(KEY_IMAGE_SIZE)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "metadata lacks image_size"))?;
    let mut in_channels = None;
    let mut channels = Vec::new();
    for b in &blocks {
        match b.kernel.shape() {
            [cout, cin, 3, 3] if b.bias.shape() == [*cout] => {
                in_channels.get_or_insert(*cin);
                channels.push(*cout);
            }
            s => return Err(Error::format(path, format!("unexpected kernel shape {s:?}"))),
        }
    }
    let arch = Arch {
        in_channels: in_channels.expect("non-empty"),
        channels,
        image_size,
    };
    let head = |take: &mut dyn FnMut(&str) -> Result<Tensor<f32>>, prefix: &str| -> Result<Head> {
        Head::new(
            take(&format!("{prefix}.weight"))?,
            take(&format!("{prefix}.bias"))?,
        )
    };
    let softmax_head = head(&mut take, "softmax_head")?;
    let sigmoid_head = if metadata.contains_key(&hash_key(Part::SigmoidHead)) {
        Some(head(&mut take, "sigmoid_head")?)
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
    }
    DualBranchModel::from_parts(arch, Backbone { blocks }, softmax_head, sigmoid_head)
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
