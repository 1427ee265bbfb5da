//! Model checkpoints: one JSON header line followed by the encoder and
//! decoder parameters as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{LayerShape, ParamVector};
use crate::pacbayes::PosteriorScale;
use crate::vae::{hex, VaeArchitecture, VaeModel};

pub const FORMAT: &str = "pbvae-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Prior,
    Posterior,
    BetaVae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: CheckpointKind,
    pub master_seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: VaeArchitecture,
    pub encoder_layers: Vec<LayerShape>,
    pub decoder_layers: Vec<LayerShape>,
    pub encoder_count: usize,
    pub decoder_count: usize,
    /// Present for PAC-Bayes posteriors only.
    pub posterior_scale: Option<PosteriorScale>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub posterior_scale: Option<PosteriorScale>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format: FORMAT.into(),
            version: VERSION,
            architecture: self.model.architecture().clone(),
            encoder_layers: self.model.phi().layer_shapes().to_vec(),
            decoder_layers: self.model.theta().layer_shapes().to_vec(),
            encoder_count: self.model.phi().total_count(),
            decoder_count: self.model.theta().total_count(),
            posterior_scale: self.posterior_scale,
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("header serialises");
        out.push(b'\n');
        for v in self.model.phi().as_slice().iter().chain(self.model.theta().as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Validation("checkpoint has no header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let body = &bytes[nl + 1..];
        let expected = 8 * (header.encoder_count + header.decoder_count);
        if body.len() != expected {
            return Err(Error::Validation(format!(
                "checkpoint body is {} bytes, header implies {expected}",
                body.len()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (enc, dec) = values.split_at(header.encoder_count);
        let phi = ParamVector::from_flat(&header.encoder_layers, enc.to_vec())?;
        let theta = ParamVector::from_flat(&header.decoder_layers, dec.to_vec())?;
        let model = VaeModel::new(header.architecture, phi, theta)?;
        Ok(Self {
            model,
            posterior_scale: header.posterior_scale,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialised checkpoint.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}
