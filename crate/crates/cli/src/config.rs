//! Run configuration: defaults, overridden by a config file, overridden by
//! flags. The resolved form is written into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use avatar_core::pca::{DEFAULT_ALPHA, DEFAULT_SAMPLES};
use avatar_core::{LossWeights, OptimizationConfig, RenderConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSettings {
    pub samples: usize,
    pub components: usize,
    /// Step size along each component.
    pub alpha: f64,
    /// Multiples of `alpha` rendered for each component.
    pub sweep_steps: Vec<i64>,
    /// How many leading components get rendered sweeps.
    pub sweep_components: usize,
}

impl Default for PcaSettings {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            components: 10,
            alpha: DEFAULT_ALPHA,
            sweep_steps: vec![-2, -1, 1, 2],
            sweep_components: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Generator manifest; the built-in reference generator when unset.
    pub backend: Option<PathBuf>,
    pub embedder: Option<PathBuf>,
    pub id_embedder: Option<PathBuf>,
    pub prompts: Vec<String>,
    pub target_image: Option<PathBuf>,
    /// One template per line, replacing the built-in set.
    pub templates: Option<PathBuf>,
    /// Tapped layer; the backend's first layer when unset.
    pub tap_layer: Option<String>,
    pub expression: String,
    pub direction: Option<PathBuf>,
    pub alphas: Vec<f64>,
    pub weights: LossWeights,
    pub optimization: OptimizationConfig,
    pub render: RenderConfig,
    pub pca: PcaSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            backend: None,
            embedder: None,
            id_embedder: None,
            prompts: Vec::new(),
            target_image: None,
            templates: None,
            tap_layer: None,
            expression: "neutral".into(),
            direction: None,
            alphas: vec![0.0, 1.0, 2.0, 3.0],
            weights: LossWeights::default(),
            optimization: OptimizationConfig::default(),
            render: RenderConfig::default(),
            pca: PcaSettings::default(),
        }
    }
}

/// What a run directory's `run.toml` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub wall_seconds: f64,
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads either a bare config or a run manifest. Relative paths are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = if value.contains_key("config") && value.contains_key("command") {
            let m: RunManifest =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            m.config
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.backend,
            &mut cfg.embedder,
            &mut cfg.id_embedder,
            &mut cfg.target_image,
            &mut cfg.templates,
            &mut cfg.direction,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        self.weights.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.optimization
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.render.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.render.image_size < 8 {
            return err(format!("image size must be at least 8, got {}", self.render.image_size));
        }
        for (what, p) in [
            ("backend manifest", &self.backend),
            ("embedder manifest", &self.embedder),
            ("identity embedder manifest", &self.id_embedder),
            ("target image", &self.target_image),
            ("template file", &self.templates),
            ("direction file", &self.direction),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return err(format!("{what} {} does not exist", p.display()));
                }
            }
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return err("alphas must be finite".into());
        }
        Ok(())
    }

    pub fn validate_objective(&self) -> Result<(), CliError> {
        match (self.prompts.is_empty(), &self.target_image) {
            (true, None) => Err(CliError::Config("give --prompt or --target-image".into())),
            (false, Some(_)) => Err(CliError::Config(
                "--prompt and --target-image are mutually exclusive".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn to_manifest(&self, command: &str, wall_seconds: f64) -> String {
        toml::to_string(&RunManifest {
            command: command.into(),
            tool_version: avatar_core::records::TOOL_VERSION.into(),
            wall_seconds,
            config: self.clone(),
        })
        .expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_values() {
        let c = RunConfig::default();
        assert_eq!(c.optimization.steps, 100);
        assert_eq!(c.optimization.learning_rate, 0.01);
        assert_eq!((c.weights.lambda_id, c.weights.lambda_l2), (0.01, 0.001));
        assert_eq!(c.optimization.yaws, vec![-30.0, 3.0, 30.0]);
        assert_eq!(c.pca.samples, 10_000);
        assert_eq!(c.pca.alpha, 10.0);
    }

    #[test]
    fn manifest_reloads_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.prompts = vec!["an old face".into()];
        c.seed = 9;
        let path = dir.path().join("run.toml");
        fs::write(&path, c.to_manifest("manipulate", 1.5)).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "sed = 3\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 4\n[optimization]\nsteps = 7\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.optimization.steps, 7);
        assert_eq!(c.weights, LossWeights::default());
    }
}
