//! Binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "LMOE"            4 bytes
//! version           u32
//! header length     u32
//! header            UTF-8 JSON: config, expansion history, per-layer layout
//! parameter count   u32
//! per parameter     u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! Parameters appear in `MoeModel::params` order. Every byte is a pure
//! function of the model, so save → load → save reproduces the file exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attention, Block, Expansion, Expert, ModelConfig, MoeLayer, MoeModel};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMOE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerLayout {
    experts: usize,
    router: bool,
    classifier: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    history: Vec<Expansion>,
    layers: Vec<LayerLayout>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let (r, c) = (self.u32()? as usize, self.u32()? as usize);
        if (r, c) != (rows, cols) {
            return Err(Error::Format(format!(
                "parameter shape {r}x{c}, layout expects {rows}x{cols}"
            )));
        }
        let raw = self.take(r * c * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(r, c, data).map_err(|e| Error::Format(e.to_string()))
    }
}

impl MoeModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            history: self.history.clone(),
            layers: self
                .blocks
                .iter()
                .map(|b| LayerLayout {
                    experts: b.moe.expert_count(),
                    router: b.moe.router.is_some(),
                    classifier: b.moe.classifier.is_some(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let params = self.params();
        let mut out = Vec::with_capacity(16 + json.len() + self.parameter_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (_, m) in params {
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let cfg = header.config;
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        if header.layers.len() != cfg.layers {
            return Err(Error::Format("layout does not match layer count".into()));
        }
        for (i, l) in header.layers.iter().enumerate() {
            let added: usize = header
                .history
                .iter()
                .map(|e| e.new_experts.get(i).copied().unwrap_or(0))
                .sum();
            if l.experts == 0 || l.experts != added + 1 || l.router == header.history.is_empty() {
                return Err(Error::Format(format!("inconsistent layout for layer {i}")));
            }
        }
        let count = r.u32()? as usize;
        let expected = 2
            + header
                .layers
                .iter()
                .map(|l| 6 + 3 * l.experts + l.router as usize + l.classifier as usize)
                .sum::<usize>()
            + 2;
        if count != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {count} parameters, layout expects {expected}"
            )));
        }
        let (h, f, v) = (cfg.hidden, cfg.ffn, cfg.vocab);
        let token_embedding = r.matrix(v, h)?;
        let position_embedding = r.matrix(cfg.context, h)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in &header.layers {
            let attn_norm = r.matrix(1, h)?;
            let attention = Attention {
                query: r.matrix(h, h)?,
                key: r.matrix(h, h)?,
                value: r.matrix(h, h)?,
                output: r.matrix(h, h)?,
            };
            let ffn_norm = r.matrix(1, h)?;
            let experts = (0..l.experts)
                .map(|_| {
                    Ok(Expert {
                        gate: r.matrix(h, f)?,
                        up: r.matrix(h, f)?,
                        down: r.matrix(f, h)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let router = if l.router { Some(r.matrix(h, l.experts)?) } else { None };
            let classifier = if l.classifier { Some(r.matrix(h, 2)?) } else { None };
            blocks.push(Block {
                attn_norm,
                attention,
                ffn_norm,
                moe: MoeLayer {
                    experts,
                    router,
                    classifier,
                },
            });
        }
        let final_norm = r.matrix(1, h)?;
        let output_head = r.matrix(h, v)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config: cfg,
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            output_head,
            history: header.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
