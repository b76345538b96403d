use serde::{Deserialize, Serialize};

use crate::accountant::Adjacency;
use crate::dpsgd::{Architecture, BlobSpec, NoiseInjectionMode, RoundNoiseTarget, SamplerChoice};
use crate::partition::PartitionPolicy;

use super::FederationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccountantKind {
    /// Poisson subsampling accounted with the binomial RDP expansion.
    PoissonRdp,
    /// Fixed-size subsampling accounted with the quadrature bound.
    FixedSizeRdp,
}

impl AccountantKind {
    pub fn sampler(self) -> SamplerChoice {
        match self {
            AccountantKind::PoissonRdp => SamplerChoice::Poisson,
            AccountantKind::FixedSizeRdp => SamplerChoice::FixedSize,
        }
    }

    pub fn default_adjacency(self) -> Adjacency {
        match self {
            AccountantKind::PoissonRdp => Adjacency::AddRemove,
            AccountantKind::FixedSizeRdp => Adjacency::ReplaceOne,
        }
    }
}

/// How each client's noise multiplier is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// No noise and no privacy ledger.
    None,
    /// Calibrate σ per client to `epsilon`; `delta` defaults to `1/|Dᵢ|`.
    Target { epsilon: f64, delta: Option<f64> },
    /// Explicit σ per client (one value broadcasts to all clients).
    Sigmas { sigmas: Vec<f64>, delta: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub accountant: AccountantKind,
    #[serde(default)]
    pub adjacency: Option<Adjacency>,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub injection: NoiseInjectionMode,
    #[serde(default)]
    pub round_noise_target: RoundNoiseTarget,
    pub noise: NoiseSpec,
    /// Inclusive integer order range `[lo, hi]` for accounting.
    #[serde(default = "default_order_range")]
    pub orders: (u32, u32),
}

fn default_clip() -> f64 {
    3.0
}

fn default_order_range() -> (u32, u32) {
    (2, 256)
}

impl PrivacyConfig {
    pub fn non_private(accountant: AccountantKind) -> Self {
        Self {
            accountant,
            adjacency: None,
            clip: default_clip(),
            injection: NoiseInjectionMode::default(),
            round_noise_target: RoundNoiseTarget::default(),
            noise: NoiseSpec::None,
            orders: default_order_range(),
        }
    }

    pub fn adjacency(&self) -> Adjacency {
        self.adjacency.unwrap_or_else(|| self.accountant.default_adjacency())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: u32,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub policy: PartitionPolicy,
    pub seed: u64,
    pub model: ModelSpec,
    pub privacy: PrivacyConfig,
}

fn default_local_epochs() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelSpec {
    pub fn architecture(self, dim: usize, classes: usize) -> Architecture {
        match self {
            ModelSpec::Logistic => Architecture::Logistic { dim, classes },
            ModelSpec::Mlp { hidden } => Architecture::Mlp {
                dim,
                hidden,
                classes,
            },
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: String| Err(FederationError::InvalidConfig(m));
        if self.clients == 0 {
            return bad("need at least one client".into());
        }
        if self.rounds == 0 {
            return bad("need at least one round".into());
        }
        if self.local_epochs == 0 {
            return bad("need at least one local epoch".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.privacy.clip > 0.0) {
            return bad(format!("clipping norm must be positive, got {}", self.privacy.clip));
        }
        let (lo, hi) = self.privacy.orders;
        if lo < 2 || hi < lo {
            return bad(format!("order range {lo}..{hi} must satisfy 2 <= lo <= hi"));
        }
        match &self.privacy.noise {
            NoiseSpec::None => {}
            NoiseSpec::Target { epsilon, delta } => {
                if !(*epsilon > 0.0) {
                    return bad(format!("target epsilon must be positive, got {epsilon}"));
                }
                check_delta(*delta)?;
            }
            NoiseSpec::Sigmas { sigmas, delta } => {
                if sigmas.is_empty() || (sigmas.len() != 1 && sigmas.len() != self.clients) {
                    return bad(format!(
                        "expected 1 or {} sigmas, got {}",
                        self.clients,
                        sigmas.len()
                    ));
                }
                if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                    return bad("sigmas must be finite and nonnegative".into());
                }
                check_delta(*delta)?;
            }
        }
        Ok(())
    }
}

fn check_delta(delta: Option<f64>) -> Result<(), FederationError> {
    match delta {
        Some(d) if !(d > 0.0 && d < 1.0) => Err(FederationError::InvalidConfig(format!(
            "delta must lie in (0, 1), got {d}"
        ))),
        _ => Ok(()),
    }
}

/// A federation config together with the synthetic data it runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub federation: FederationConfig,
    pub data: BlobSpec,
}

impl SimulationConfig {
    pub fn from_toml(text: &str) -> Result<Self, FederationError> {
        toml::from_str(text).map_err(|e| FederationError::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("simulation config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[federation]
clients = 4
rounds = 5
learning_rate = 0.5
batch_size = 550
policy = "linear"
seed = 7

[federation.model]
kind = "logistic"

[federation.privacy]
accountant = "fixed-size-rdp"
injection = "per-step"

[federation.privacy.noise]
mode = "target"
epsilon = 10.0

[data]
samples = 20000
dim = 20
"#;

    #[test]
    fn parses_toml() {
        let cfg = SimulationConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.federation.clients, 4);
        assert_eq!(cfg.federation.local_epochs, 1);
        assert_eq!(cfg.federation.privacy.clip, 3.0);
        assert_eq!(cfg.federation.privacy.adjacency(), Adjacency::ReplaceOne);
        assert_eq!(cfg.data.classes, 2);
        cfg.federation.validate().unwrap();
        let again = SimulationConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = SAMPLE.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(SimulationConfig::from_toml(&text).is_err());
    }
}
