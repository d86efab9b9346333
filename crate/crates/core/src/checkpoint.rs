//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FSACKPT\0"
//! version  u32      1
//! meta     u32 length + UTF-8 JSON (CheckpointMeta)
//! count    u32      number of tensors
//! tensor   u16 name length, name, u8 ndim, ndim × u32 dims, f32 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdapterParams, Affine, ImageMlp};
use crate::descriptor::DescriptorParams;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::model::{Head, HeadOptions};
use crate::prompts::TextAnchors;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"FSACKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_name: String,
    pub k_shot: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub gamma1: f64,
    pub options: HeadOptions,
    pub normalize_anchor: bool,
    pub config_hash: String,
    pub backend_name: String,
    pub backend_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub head: Head,
    /// Text anchors the head was trained against.
    pub anchors: TextAnchors,
}

/// Rounds every value to the nearest `f32`, the precision checkpoints store.
pub fn snap_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = self
            .head
            .tensors()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect();
        out.push(("anchors.normal".into(), self.anchors.normal.as_row()));
        out.push(("anchors.abnormal".into(), self.anchors.abnormal.as_row()));
        if let Some(p) = &self.head.support_prototype {
            out.push(("support_prototype".into(), Matrix::row_vector(p.clone())));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        let tensors = self.named_tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(2);
            buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 8] = read_array(&mut r)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(Error::Compatibility(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&read_vec(&mut r, meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let [ndim] = read_array::<1>(&mut r)?;
            let dims: Vec<usize> = (0..ndim)
                .map(|_| Ok(u32::from_le_bytes(read_array(&mut r)?) as usize))
                .collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(Error::Format(format!("tensor {name} has {ndim} dimensions"))),
            };
            let raw = read_vec(&mut r, rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Self::assemble(meta, tensors)
    }

    fn assemble(meta: CheckpointMeta, mut tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let m = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if m.shape() != (rows, cols) {
                return Err(Error::Format(format!(
                    "tensor {name} is {:?}, expected {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
            Ok(m)
        };
        let (c, h) = (meta.embed_dim, meta.hidden);
        let mut affine = |prefix: &str, input: usize, output: usize| -> Result<Affine> {
            Ok(Affine {
                weight: take(&format!("{prefix}.weight"), output, input)?,
                bias: take(&format!("{prefix}.bias"), 1, output)?,
            })
        };
        let down = affine("image_adapter.down", c, h)?;
        let up = affine("image_adapter.up", h, c)?;
        let text_mlp = affine("text_adapter", c, c)?;
        let proj_i2t = affine("descriptor.i2t", c, c)?;
        let proj_t2i = affine("descriptor.t2i", c, c)?;
        let anchor = |m: Matrix| Embedding {
            values: m.into_data(),
            normalized: meta.normalize_anchor,
        };
        let anchors = TextAnchors {
            normal: anchor(take("anchors.normal", 1, c)?),
            abnormal: anchor(take("anchors.abnormal", 1, c)?),
        };
        let support_prototype = match tensors.remove("support_prototype") {
            Some(m) if m.shape() == (1, c) => Some(m.into_data()),
            Some(m) => return Err(Error::Format(format!("support_prototype is {:?}", m.shape()))),
            None => None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        let head = Head {
            adapters: AdapterParams {
                image_mlp: ImageMlp { down, up },
                text_mlp,
                alpha: meta.alpha,
                beta: meta.beta,
            },
            descriptor: DescriptorParams {
                proj_i2t,
                proj_t2i,
                gamma1: meta.gamma1,
            },
            options: meta.options,
            support_prototype,
        };
        Ok(Self { meta, head, anchors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_array<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(buf)
}

fn read_vec(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::ResidualRatios;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let ratios = ResidualRatios {
            alpha: (0.4, 0.6),
            beta: (0.4, 0.6),
        };
        let mut head = Head::init(8, 4, ratios, 0.7, HeadOptions::default(), &mut stream(1)).unwrap();
        head.support_prototype = Some(vec![0.25; 8]);
        for (_, t) in head.tensors_mut() {
            snap_to_f32(t.data_mut());
        }
        let e = |v: f64| Embedding {
            values: vec![v; 8],
            normalized: false,
        };
        Checkpoint {
            meta: CheckpointMeta {
                class_name: "bottle".into(),
                k_shot: 2,
                seed: 3,
                embed_dim: 8,
                hidden: 2,
                alpha: (0.4, 0.6),
                beta: (0.4, 0.6),
                gamma1: 0.7,
                options: HeadOptions::default(),
                normalize_anchor: false,
                config_hash: "abc".into(),
                backend_name: "toy".into(),
                backend_fingerprint: "fp".into(),
            },
            head,
            anchors: TextAnchors {
                normal: e(0.5),
                abnormal: e(-0.5),
            },
        }
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_is_as_documented() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"FSACKPT\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Compatibility(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
