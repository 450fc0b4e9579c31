use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::clusters::DEFAULT_EMA_DECAY;
use crate::error::{Error, Result};
use crate::losses::{FocalConfig, MarginConfig};
use crate::network::NetworkConfig;
use crate::numerics::Temperature;
use crate::scoring::{LayerEnergyConfig, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Final-layer semantic energy hinge plus the configured cluster loss.
    Se,
    /// Multi-layer semantic energy hinge plus the configured cluster loss.
    Mlse,
    /// Multi-layer semantic energy hinge with Cluster Focal Loss.
    CflMlse,
    /// Vanilla free-energy hinge; no cluster means.
    EnergyBaseline,
    /// Cross-entropy only.
    SoftmaxBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Se => "se",
            Mode::Mlse => "mlse",
            Mode::CflMlse => "cfl_mlse",
            Mode::EnergyBaseline => "energy_baseline",
            Mode::SoftmaxBaseline => "softmax_baseline",
        }
    }

    pub fn uses_means(self) -> bool {
        matches!(self, Mode::Se | Mode::Mlse | Mode::CflMlse)
    }

    pub fn uses_ood(self) -> bool {
        self != Mode::SoftmaxBaseline
    }

    /// Score the hinge loss is applied to, if any.
    pub fn hinge_scorer(self) -> Option<Scorer> {
        match self {
            Mode::Se => Some(Scorer::Semantic),
            Mode::Mlse | Mode::CflMlse => Some(Scorer::MultilayerSemantic),
            Mode::EnergyBaseline => Some(Scorer::Vanilla),
            Mode::SoftmaxBaseline => None,
        }
    }

    /// The score a model trained in this mode is evaluated with by default.
    pub fn default_scorer(self) -> Scorer {
        self.hinge_scorer().unwrap_or(Scorer::SoftmaxBaseline)
    }

    pub fn allows_scorer(self, scorer: Scorer) -> bool {
        match scorer {
            Scorer::Vanilla | Scorer::SoftmaxBaseline => true,
            Scorer::Semantic => self.uses_means(),
            Scorer::MultilayerSemantic => matches!(self, Mode::Mlse | Mode::CflMlse),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLoss {
    Cfl,
    Ii,
}

/// How the class means get their first estimate after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterInit {
    /// Means of the warmup model's logits over the in-distribution train set.
    #[default]
    LogitMeans,
    /// Warmup adds ii-loss against per-epoch logit means before the final estimate.
    IiWarmup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub margins: MarginConfig,
    pub focal: FocalConfig,
    pub lambda: f64,
    pub temperature: Temperature,
    pub layer_energy: LayerEnergyConfig,
    pub cluster_loss: ClusterLoss,
    pub cluster_loss_weight: f64,
    pub cluster_init: ClusterInit,
    pub mode: Mode,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_in: usize,
    pub batch_out: usize,
    pub ema_decay: f64,
    pub cfl_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let network = NetworkConfig::default();
        let layer_energy = LayerEnergyConfig::last_two(network.hidden_dims.len());
        Self {
            network,
            margins: MarginConfig::default(),
            focal: FocalConfig::default(),
            lambda: 0.1,
            temperature: Temperature::ONE,
            layer_energy,
            cluster_loss: ClusterLoss::Ii,
            cluster_loss_weight: 1.0,
            cluster_init: ClusterInit::LogitMeans,
            mode: Mode::CflMlse,
            warmup_epochs: 1,
            epochs: 30,
            lr: 0.01,
            batch_in: 128,
            batch_out: 256,
            ema_decay: DEFAULT_EMA_DECAY,
            cfl_scale: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Cluster loss actually used by the configured mode.
    pub fn effective_cluster_loss(&self) -> Option<ClusterLoss> {
        match self.mode {
            Mode::Se | Mode::Mlse => Some(self.cluster_loss),
            Mode::CflMlse => Some(ClusterLoss::Cfl),
            Mode::EnergyBaseline | Mode::SoftmaxBaseline => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.margins.validate()?;
        self.focal.validate(self.network.num_classes)?;
        self.layer_energy.validate(self.network.hidden_dims.len())?;
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")))
            }
        };
        nonneg("lambda", self.lambda)?;
        nonneg("cluster_loss_weight", self.cluster_loss_weight)?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.cfl_scale.is_finite() && self.cfl_scale > 0.0) {
            return Err(Error::Config(format!("cfl_scale must be positive, got {}", self.cfl_scale)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if self.batch_in == 0 || self.batch_out == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::Config("warmup_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"cfl_mlse\""));
        assert!(text.contains("\"batch_out\":256"));
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"mode":"energy_baseline","epochs":3}"#).unwrap();
        assert_eq!(cfg.mode, Mode::EnergyBaseline);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.effective_cluster_loss(), None);
    }

    #[test]
    fn mode_matrix() {
        let c = TrainConfig { mode: Mode::CflMlse, cluster_loss: ClusterLoss::Ii, ..TrainConfig::default() };
        assert_eq!(c.effective_cluster_loss(), Some(ClusterLoss::Cfl));
        let c = TrainConfig { mode: Mode::Se, cluster_loss: ClusterLoss::Ii, ..TrainConfig::default() };
        assert_eq!(c.effective_cluster_loss(), Some(ClusterLoss::Ii));
        assert!(!Mode::EnergyBaseline.allows_scorer(Scorer::Semantic));
        assert!(!Mode::Se.allows_scorer(Scorer::MultilayerSemantic));
        assert!(Mode::CflMlse.allows_scorer(Scorer::MultilayerSemantic));
        assert_eq!(Mode::SoftmaxBaseline.hinge_scorer(), None);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { ema_decay: 1.0, ..TrainConfig::default() }.validate().is_err());
        let bad_layers = LayerEnergyConfig { layer_indices: vec![5], layer_weights: vec![1.0] };
        assert!(TrainConfig { layer_energy: bad_layers, ..TrainConfig::default() }.validate().is_err());
    }
}
