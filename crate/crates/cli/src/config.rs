//! Resolved run configuration: documented defaults, overridden by an
//! optional JSON file, overridden again by command-line flags. The
//! resolved form is echoed into every run manifest.

use serde::{Deserialize, Serialize};
use shadowcat_core::model::Hyperparams;
use shadowcat_core::train::TrainConfig;

use crate::error::CliError;

/// Bottleneck weight, accepted as a plain float or as a power of two
/// written `2^k` (k may be negative).
pub fn parse_beta(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if let Some(exp) = s.strip_prefix("2^") {
        let k: i32 = exp
            .parse()
            .map_err(|_| format!("bad exponent in beta literal '{s}'"))?;
        return Ok(2f64.powi(k));
    }
    let v: f64 = s.parse().map_err(|_| format!("bad beta value '{s}'"))?;
    if v < 0.0 {
        return Err(format!("beta must be non-negative, got {v}"));
    }
    Ok(v)
}

/// Everything a run needs, with every field defaulted. Unknown keys in
/// a config file are rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub num_qubits: usize,
    pub beta: f64,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: u64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub kl_warmup_steps: u64,
    pub weight_decay: f64,
    /// architecture overrides; when absent, sized by qubit count
    pub embed_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    /// shadows drawn per tomographic evaluation
    pub eval_shadows: usize,
    pub eval_seed: u64,
    pub task_trials: usize,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_seed: u64,
}

impl Default for Config {
    fn default() -> Config {
        let t = TrainConfig::defaults(3, 0.5, 0);
        Config {
            num_qubits: 3,
            beta: 0.5,
            seed: 0,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            eval_every: t.eval_every,
            plateau_window: t.plateau_window,
            plateau_tol: t.plateau_tol,
            kl_warmup_steps: t.kl_warmup_steps,
            weight_decay: t.weight_decay,
            embed_dim: None,
            layers: None,
            heads: None,
            ff_dim: None,
            eval_shadows: 200_000,
            eval_seed: 1,
            task_trials: 10_000,
            perplexity: 30.0,
            tsne_iterations: 1_000,
            tsne_seed: 1,
        }
    }
}

impl Config {
    pub fn load(path: &std::path::Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!(
            "config file {}: {e}",
            path.display()
        )))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            beta: self.beta,
            num_qubits: self.num_qubits,
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            eval_every: self.eval_every,
            plateau_window: self.plateau_window,
            plateau_tol: self.plateau_tol,
            kl_warmup_steps: self.kl_warmup_steps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        let mut hp = Hyperparams::defaults(self.num_qubits, self.beta);
        if let Some(d) = self.embed_dim {
            hp.embed_dim = d;
        }
        if let Some(l) = self.layers {
            hp.layers = l;
        }
        if let Some(h) = self.heads {
            hp.heads = h;
        }
        if let Some(f) = self.ff_dim {
            hp.ff_dim = f;
        }
        hp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_literals() {
        assert_eq!(parse_beta("2^-5").unwrap(), 0.03125);
        assert_eq!(parse_beta("2^6").unwrap(), 64.0);
        assert_eq!(parse_beta("0.5").unwrap(), 0.5);
        assert!(parse_beta("2^x").is_err());
        assert!(parse_beta("-1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = serde_json::from_str::<Config>(r#"{"betaa": 0.5}"#).unwrap_err();
        assert!(err.to_string().contains("betaa"));
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let c = Config::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<Config>(&text).unwrap(), c);
    }
}
