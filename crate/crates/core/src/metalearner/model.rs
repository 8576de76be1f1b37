use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden widths used by the experiments.
pub const DEFAULT_HIDDEN: [usize; 2] = [80, 60];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Fully connected network shape: input, hidden widths, and class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if input == 0 || classes < 2 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "bad architecture {input}→{hidden:?}→{classes}"
            )));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Ok(Self { sizes })
    }

    /// The 80/60 hidden-layer network used throughout the experiments.
    pub fn standard(input: usize, classes: usize) -> Result<Self> {
        Self::new(input, &DEFAULT_HIDDEN, classes)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    /// Width of the last hidden layer, i.e. the embedding dimension.
    pub fn embedding_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 2]
    }

    pub(crate) fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    inputs: w[0],
                    outputs: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat parameter vector: per layer, a row-major `outputs × inputs` weight
/// matrix followed by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    sizes: Vec<usize>,
    len: usize,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.num_params();
        Self {
            arch,
            values: vec![0.0; n],
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) per weight, zero biases.
    pub fn glorot(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut params = Self::zeros(arch);
        for layer in params.arch.layers() {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let end = layer.weight_offset + layer.inputs * layer.outputs;
            for w in &mut params.values[layer.weight_offset..end] {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(Error::ShapeMismatch {
                expected: arch.num_params(),
                found: values.len(),
            });
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * direction`.
    pub fn axpy(&mut self, scale: f64, direction: &[f64]) {
        debug_assert_eq!(direction.len(), self.values.len());
        for (p, d) in self.values.iter_mut().zip(direction) {
            *p += scale * d;
        }
    }

    /// Checkpoint layout: u32 LE header length, JSON `{sizes, len}`, then
    /// `len` little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            sizes: self.arch.sizes.clone(),
            len: self.values.len(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(4 + header.len() + 8 * self.values.len());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |needed| Error::TruncatedFile {
            needed,
            found: bytes.len(),
        };
        let header_len = u32::from_le_bytes(bytes.get(..4).ok_or(truncated(4))?.try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(bytes.get(4..4 + header_len).ok_or(truncated(4 + header_len))?)?;
        let body_start = 4 + header_len;
        let body = bytes
            .get(body_start..body_start + 8 * header.len)
            .ok_or(truncated(body_start + 8 * header.len))?;
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_values(Architecture { sizes: header.sizes }, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
