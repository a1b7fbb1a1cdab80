//! Versioned binary checkpoint container and the loaded model.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` header length, the
//! JSON header, `u64` parameter count, the parameters as little-endian
//! `f64`, and the SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::denoiser::{ArchSpec, Conditioning, Denoiser};
use super::schedule::NoiseSchedule;
use super::tensor::Tensor;
use super::train::TrainingConfig;
use crate::error::{Error, Result};
use crate::features::{validate_for_provider, EmbeddingProvider, TextFeaturePyramid, ToyProvider, ToyVocabulary};
use crate::layout::{AdmissibleLevels, Layout, ValidationReport, ViolationKind};
use crate::scene::SceneSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANYLVLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: ArchSpec,
    pub schedule: NoiseSchedule,
    pub vocabulary: ToyVocabulary,
    /// Colors and shapes of the training vocabulary, when trained on scenes.
    pub scene_spec: Option<SceneSpec>,
    pub admissible_levels: AdmissibleLevels,
    pub training: Option<TrainingConfig>,
    pub dataset_checksum: Option<String>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl ModelCheckpoint {
    /// Untrained network with the standard initialization.
    pub fn untrained(header: CheckpointHeader, seed: u64) -> Result<Self> {
        let net = Denoiser::new(header.arch.clone())?;
        Ok(Self { params: net.init_params(seed), header })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + self.params.len() * 8 + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e + 8 <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])?;
        let count = u64::from_le_bytes(body[header_end..header_end + 8].try_into().unwrap()) as usize;
        let blob = &body[header_end + 8..];
        if blob.len() != count * 8 {
            return Err(bad("parameter blob length does not match its count"));
        }
        let params = blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// A checkpoint made ready for inference.
pub struct Model {
    pub header: CheckpointHeader,
    net: Denoiser,
    params: Vec<f64>,
    provider: ToyProvider,
}

impl Model {
    pub fn new(checkpoint: ModelCheckpoint) -> Result<Self> {
        let net = Denoiser::new(checkpoint.header.arch.clone())?;
        if checkpoint.params.len() != net.num_params() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, the architecture needs {}",
                checkpoint.params.len(),
                net.num_params()
            )));
        }
        if checkpoint.header.schedule.steps() != checkpoint.header.arch.diffusion_steps {
            return Err(Error::Format("schedule length differs from the architecture's step count".into()));
        }
        let provider = ToyProvider::from_vocabulary(checkpoint.header.vocabulary.clone())?;
        if provider.dim() != checkpoint.header.arch.embed_dim {
            return Err(Error::Format("vocabulary dimension differs from the architecture".into()));
        }
        Ok(Self { header: checkpoint.header, net, params: checkpoint.params, provider })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ModelCheckpoint::load(path)?)
    }

    pub fn canvas_exponent(&self) -> u32 {
        self.header.arch.canvas_exponent
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.header.schedule
    }

    pub fn provider(&self) -> &ToyProvider {
        &self.provider
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.header.arch.side();
        (self.header.arch.image_channels, s, s)
    }

    /// Structural checks plus the model's vocabulary, canvas and levels.
    pub fn check_layout(&self, layout: &Layout) -> ValidationReport {
        let mut report = validate_for_provider(layout, &self.provider);
        if layout.canvas_exponent != self.canvas_exponent() {
            report.push(
                ViolationKind::CanvasExponent,
                None,
                format!("canvas exponent {} differs from the model's {}", layout.canvas_exponent, self.canvas_exponent()),
            );
        }
        for (i, r) in layout.regions.iter().enumerate() {
            if !self.header.admissible_levels.contains(r.precision) {
                report.push(
                    ViolationKind::PrecisionLevel,
                    Some(i),
                    format!("precision {} is not admissible for this model", r.precision),
                );
            }
        }
        report
    }

    pub fn epsilon_with(&self, x: &Tensor, step: u32, cond: &Conditioning) -> Tensor {
        self.net.predict(&self.params, x, step as f64, cond)
    }
}

/// Anything that predicts noise from `(x_t, t, pyramid)`.
pub trait EpsilonModel: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn null_embedding(&self) -> &crate::features::Embedding;
    fn canvas_exponent(&self) -> u32;
    fn image_shape(&self) -> (usize, usize, usize);
    fn epsilon(&self, x: &Tensor, step: u32, pyramid: &TextFeaturePyramid) -> Result<Tensor>;
}

impl EpsilonModel for Model {
    fn schedule(&self) -> &NoiseSchedule {
        &self.header.schedule
    }

    fn null_embedding(&self) -> &crate::features::Embedding {
        self.provider.null_embedding()
    }

    fn canvas_exponent(&self) -> u32 {
        self.header.arch.canvas_exponent
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        Model::image_shape(self)
    }

    fn epsilon(&self, x: &Tensor, step: u32, pyramid: &TextFeaturePyramid) -> Result<Tensor> {
        let shape = self.image_shape();
        if (x.channels(), x.height(), x.width()) != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                actual: format!("{:?}", (x.channels(), x.height(), x.width())),
            });
        }
        Ok(self.epsilon_with(x, step, &self.net.conditioning(pyramid)?))
    }
}
