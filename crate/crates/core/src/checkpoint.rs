//! Trained model bundle and its JSON checkpoint.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::cli::TrainConfig;
use crate::clusters::ClusterMeans;
use crate::error::{check_dim, Error, Result};
use crate::network::{ForwardTrace, NetworkState};
use crate::numerics::argmax;
use crate::scoring::{EnergyScore, ScoreInputs, Scorer};

pub const FORMAT_VERSION: u32 = 1;

/// Network parameters, frozen class means, and the config they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub network: NetworkState,
    pub means: Option<ClusterMeans>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    config: TrainConfig,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_means: Option<Vec<Vec<f64>>>,
    format_version: u32,
}

impl Model {
    pub fn score_trace(&self, trace: &ForwardTrace, scorer: Scorer) -> Result<EnergyScore> {
        scorer.score(&ScoreInputs {
            logits: &trace.logits,
            trace: Some(trace),
            means: self.means.as_ref(),
            layers: &self.config.layer_energy,
            temperature: self.config.temperature,
        })
    }

    pub fn score_logits(&self, logits: &[f64], scorer: Scorer) -> Result<EnergyScore> {
        scorer.score(&ScoreInputs {
            logits,
            trace: None,
            means: self.means.as_ref(),
            layers: &self.config.layer_energy,
            temperature: self.config.temperature,
        })
    }

    /// Raw-logit argmax.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.network.forward(x)?.logits))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointDoc {
            config: self.config.clone(),
            weights: self.network.weights.clone(),
            biases: self.network.biases.clone(),
            cluster_means: self.means.as_ref().map(|m| m.means.clone()),
            format_version: FORMAT_VERSION,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                doc.format_version
            )));
        }
        let network = NetworkState {
            config: doc.config.network.clone(),
            weights: doc.weights,
            biases: doc.biases,
        };
        network.validate()?;
        let means = match doc.cluster_means {
            Some(m) => {
                let means = ClusterMeans::from_matrix(m, doc.config.ema_decay)?;
                check_dim(doc.config.network.num_classes, means.num_classes())?;
                Some(means)
            }
            None => None,
        };
        Ok(Model { config: doc.config, network, means })
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_network;

    #[test]
    fn roundtrip_preserves_forward_bitwise() {
        let config = TrainConfig::default();
        let network = init_network(&config.network).unwrap();
        let means = ClusterMeans::from_matrix(
            (0..4).map(|i| (0..4).map(|j| (i * 4 + j) as f64 / 7.0 + 0.1).collect()).collect(),
            config.ema_decay,
        )
        .unwrap();
        let model = Model { config, network, means: Some(means) };
        let back = Model::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back.network.weights, model.network.weights);
        let x = [0.337, -1.91];
        let a = model.network.forward(&x).unwrap();
        let b = back.network.forward(&x).unwrap();
        for (u, v) in a.logits.iter().zip(&b.logits) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        assert_eq!(back.to_json().unwrap(), model.to_json().unwrap());
    }

    #[test]
    fn rejects_wrong_version_and_shapes() {
        let config = TrainConfig::default();
        let network = init_network(&config.network).unwrap();
        let model = Model { config, network, means: None };
        let text = model.to_json().unwrap();
        assert!(!text.contains("cluster_means"));
        let bumped = text.replace("\"format_version\":1", "\"format_version\":2");
        assert!(Model::from_json(&bumped).is_err());
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["cluster_means"] = serde_json::json!([[1.0, 2.0], [3.0, 4.0]]);
        assert!(Model::from_json(&doc.to_string()).is_err());
    }
}
