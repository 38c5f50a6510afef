//! Versioned JSON container for model weights.
//!
//! ```text
//! { "format": "gdsr-weights", "version": 1, "payload": { "kind": "conv_denoiser", ... } }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save → load reproduces every weight bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::ConvDenoiserParams;
use crate::error::{Error, Result};
use crate::perceptual::FeatureExtractor;

pub const FORMAT_TAG: &str = "gdsr-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsPayload {
    ConvDenoiser(ConvDenoiserParams),
    FeatureExtractor(FeatureExtractor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub format: String,
    pub version: u32,
    pub payload: WeightsPayload,
}

impl WeightsFile {
    pub fn new(payload: WeightsPayload) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightsFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        match &file.payload {
            WeightsPayload::ConvDenoiser(p) => p.validate()?,
            WeightsPayload::FeatureExtractor(fe) => fe.validate()?,
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn save_denoiser(params: &ConvDenoiserParams, path: impl AsRef<Path>) -> Result<()> {
    WeightsFile::new(WeightsPayload::ConvDenoiser(params.clone())).save(path)
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<ConvDenoiserParams> {
    match WeightsFile::load(path)?.payload {
        WeightsPayload::ConvDenoiser(p) => Ok(p),
        WeightsPayload::FeatureExtractor(_) => Err(Error::Checkpoint("file holds feature-extractor weights".into())),
    }
}

pub fn save_extractor(fe: &FeatureExtractor, path: impl AsRef<Path>) -> Result<()> {
    WeightsFile::new(WeightsPayload::FeatureExtractor(fe.clone())).save(path)
}

pub fn load_extractor(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
    match WeightsFile::load(path)?.payload {
        WeightsPayload::FeatureExtractor(fe) => Ok(fe),
        WeightsPayload::ConvDenoiser(_) => Err(Error::Checkpoint("file holds denoiser weights".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConvArch;
    use crate::rng::Rng;

    #[test]
    fn denoiser_round_trip_is_exact() {
        let mut p = ConvDenoiserParams::init(ConvArch::default(), 17).unwrap();
        let mut rng = Rng::new(1);
        for v in p.params_mut() {
            *v += rng.normal() * 1e-3;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_denoiser(&p, &path).unwrap();
        assert_eq!(load_denoiser(&path).unwrap(), p);
        assert!(load_extractor(&path).is_err());
    }

    #[test]
    fn extractor_round_trip() {
        let fe = FeatureExtractor::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fe.json");
        save_extractor(&fe, &path).unwrap();
        assert_eq!(load_extractor(&path).unwrap(), fe);
    }

    #[test]
    fn rejects_wrong_version_and_garbage() {
        let mut file = WeightsFile::new(WeightsPayload::FeatureExtractor(FeatureExtractor::identity()));
        file.version = 99;
        assert!(WeightsFile::from_json(&file.to_json()).is_err());
        assert!(WeightsFile::from_json("{\"format\": 1}").is_err());
    }
}
