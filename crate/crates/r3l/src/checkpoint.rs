//! Checkpoint container.
//!
//! A checkpoint is one JSON object:
//!
//! ```text
//! {
//!   "format": "r3l-checkpoint",
//!   "version": 1,
//!   "model_kind": "r3l" | "r3n",
//!   "num_actions": 27,            // size of the residual action set
//!   "training": { "seed", "sigma_train", "stages", "updates", "psnr_holdout", "config" },
//!   "layers": [
//!     { "name": "encoder.0", "shape": [out, in, 3, 3], "dilation": 1,
//!       "kernel": [...], "bias": [...] },
//!     ...
//!   ]
//! }
//! ```
//!
//! Kernels are flattened row-major over `[out, in, ky, kx]`. Floats are written
//! with shortest round-trip formatting, so save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use r3l_core::networks::{ConvLayer, ModelKind, ModelParams};
use r3l_core::tensor::Shape;
use r3l_core::training::TrainConfig;
use r3l_core::Tensor;

use crate::error::{Error, Result};

pub const FORMAT: &str = "r3l-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingInfo {
    pub seed: u64,
    pub sigma_train: f64,
    pub stages: usize,
    pub updates: u64,
    pub psnr_holdout: Option<f64>,
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub training: TrainingInfo,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    name: String,
    shape: [usize; 4],
    dilation: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    model_kind: String,
    num_actions: usize,
    training: TrainingInfo,
    layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, training: TrainingInfo) -> Self {
        Self { params, training }
    }

    pub fn to_json(&self) -> String {
        let p = &self.params;
        let doc = Document {
            format: FORMAT.to_owned(),
            version: VERSION,
            model_kind: p.kind.as_str().to_owned(),
            num_actions: p.num_actions,
            training: self.training.clone(),
            layers: p
                .layers
                .iter()
                .map(|l| {
                    let s = l.kernel.shape();
                    LayerRecord {
                        name: l.name.clone(),
                        shape: [s.batch, s.channels, s.height, s.width],
                        dilation: l.dilation,
                        kernel: l.kernel.data().to_vec(),
                        bias: l.bias.data().to_vec(),
                    }
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        out.push('\n');
        out
    }

    /// Parses and validates; `reason` strings are suitable for a user-facing error.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: Document = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.format != FORMAT {
            return Err(format!("format is {:?}, expected {FORMAT:?}", doc.format));
        }
        if doc.version != VERSION {
            return Err(format!("unsupported version {} (this build reads {VERSION})", doc.version));
        }
        let kind: ModelKind = doc.model_kind.parse().map_err(|e: r3l_core::Error| e.to_string())?;
        let layers = doc
            .layers
            .into_iter()
            .map(|r| {
                let [o, i, kh, kw] = r.shape;
                let kernel = Tensor::from_vec(Shape::new(o, i, kh, kw), r.kernel)
                    .map_err(|e| format!("layer {}: kernel {e}", r.name))?;
                let bias = Tensor::from_vec(Shape::new(1, o, 1, 1), r.bias).map_err(|e| format!("layer {}: bias {e}", r.name))?;
                Ok(ConvLayer {
                    name: r.name,
                    dilation: r.dilation,
                    kernel,
                    bias,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let params = ModelParams {
            kind,
            num_actions: doc.num_actions,
            layers,
        };
        params.validate().map_err(|e| e.to_string())?;
        Ok(Self {
            params,
            training: doc.training,
        })
    }
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text).map_err(|reason| Error::Checkpoint {
        path: path.to_owned(),
        reason,
    })
}
