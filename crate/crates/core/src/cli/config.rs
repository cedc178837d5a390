use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::network::{Activation, InputEncoding, LayerGraph, Unit};
use crate::neuron::NeuronConfig;
use crate::tensor::{Adam, AdamConfig, Optimizer, Sgd};

use super::CliError;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "IBRA_CONFIG";
/// Name of the resolved config written next to every command's outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronChoice {
    /// IBRA-LIF with ceiling `d` and scale `n`.
    Ibra,
    /// Integer LIF with integer ceiling `d`.
    Ilif,
    /// Binary LIF with threshold `v_th`.
    Lif,
    /// Conventional network with ReLU.
    Relu,
    /// Conventional network with `clip(x, 0, d)`.
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingChoice {
    Direct,
    Spike,
}

impl From<EncodingChoice> for InputEncoding {
    fn from(e: EncodingChoice) -> Self {
        match e {
            EncodingChoice::Direct => InputEncoding::Direct,
            EncodingChoice::Spike => InputEncoding::Spike,
        }
    }
}

/// Every knob of a run, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: Arch,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    /// Batch norm after each hidden linear layer (the CNN always has it).
    pub batch_norm: bool,
    pub neuron: NeuronChoice,
    pub d: f64,
    pub n: u32,
    pub timesteps: usize,
    pub alpha: f64,
    pub v_th: f64,
    pub encoding: EncodingChoice,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: String,
    pub samples: usize,
    pub test_samples: usize,
    /// Load the dataset from this directory instead of generating it.
    pub data: Option<PathBuf>,
    /// Shift and scale features to zero mean and unit variance, using
    /// statistics of the training split.
    pub standardize: bool,
    pub tol: f64,
    pub e_mac: f64,
    pub e_ac: f64,
    pub lif_timesteps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            hidden: vec![32],
            channels: vec![8, 16],
            batch_norm: true,
            neuron: NeuronChoice::Ibra,
            d: 5.11,
            n: 100,
            timesteps: 1,
            alpha: 1.0,
            v_th: 1.0,
            encoding: EncodingChoice::Direct,
            optimizer: OptimizerChoice::Adam,
            lr: 1e-2,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            dataset: "blobs:3".into(),
            samples: 600,
            test_samples: 200,
            data: None,
            standardize: true,
            tol: 1e-5,
            e_mac: 4.6,
            e_ac: 0.9,
            lif_timesteps: 4,
        }
    }
}

/// A sparse set of overrides: command-line flags or a config file.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[arg(long, global = true, value_enum)]
    pub arch: Option<Arch>,
    /// Hidden widths of the MLP, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Channels per CNN stage, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub batch_norm: Option<bool>,
    #[arg(long, global = true, value_enum)]
    pub neuron: Option<NeuronChoice>,
    #[arg(long, global = true)]
    pub d: Option<f64>,
    #[arg(long, global = true)]
    pub n: Option<u32>,
    #[arg(long, global = true)]
    pub timesteps: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub v_th: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub encoding: Option<EncodingChoice>,
    #[arg(long, global = true, value_enum)]
    pub optimizer: Option<OptimizerChoice>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `blobs`, `blobs:K`, `moons` or `digits`.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub test_samples: Option<usize>,
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub standardize: Option<bool>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub e_mac: Option<f64>,
    #[arg(long, global = true)]
    pub e_ac: Option<f64>,
    #[arg(long, global = true)]
    pub lif_timesteps: Option<usize>,
}

macro_rules! overlay {
    ($cfg:expr, $o:expr, $($f:ident),*) => {
        $(if let Some(v) = &$o.$f { $cfg.$f = v.clone(); })*
    };
}

impl RunConfig {
    pub fn apply(&mut self, o: &ConfigOverrides) {
        overlay!(
            self, o, arch, hidden, channels, batch_norm, neuron, d, n, timesteps, alpha, v_th, encoding, optimizer, lr,
            epochs, batch_size, seed, dataset, samples, test_samples, standardize, tol, e_mac, e_ac, lif_timesteps
        );
        if let Some(p) = &o.data {
            self.data = Some(p.clone());
        }
    }

    /// Defaults, then `flags`, then the config file: the file has the last
    /// word.
    pub fn resolve(flags: &ConfigOverrides, file: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply(flags);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let o: ConfigOverrides = toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            cfg.apply(&o);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.timesteps == 0 || self.lif_timesteps == 0 {
            return bad("timesteps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be >= 0");
        }
        if self.n == 0 {
            return bad("n must be >= 1");
        }
        self.energy_model().map_err(|e| CliError::Usage(e.to_string()))?;
        if !matches!(self.neuron, NeuronChoice::Relu) {
            if let Unit::Neuron(cfg) = self.unit()? {
                cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn energy_model(&self) -> Result<EnergyModel, crate::energy::EnergyError> {
        EnergyModel::new(self.e_mac, self.e_ac)
    }

    pub fn unit(&self) -> Result<Unit, CliError> {
        Ok(match self.neuron {
            NeuronChoice::Ibra => Unit::Neuron(NeuronConfig::ibra(self.d, self.n, self.timesteps).with_alpha(self.alpha)),
            NeuronChoice::Ilif => {
                if self.d.fract() != 0.0 || self.d < 1.0 {
                    return Err(CliError::Usage(format!("i-lif needs an integer d >= 1, got {}", self.d)));
                }
                Unit::Neuron(NeuronConfig::ilif(self.d as u32, self.timesteps).with_alpha(self.alpha))
            }
            NeuronChoice::Lif => Unit::Neuron(NeuronConfig::lif(self.v_th, self.alpha, self.timesteps)),
            NeuronChoice::Relu => Unit::Activation(Activation::Relu),
            NeuronChoice::Clip => Unit::Activation(Activation::Clip { ceiling: self.d }),
        })
    }

    /// Builds the configured architecture for samples of `sample_shape`.
    pub fn build_graph(&self, sample_shape: &[usize], classes: usize) -> Result<LayerGraph, CliError> {
        let unit = self.unit()?;
        let g = match self.arch {
            Arch::Mlp => LayerGraph::mlp(
                sample_shape.iter().product(),
                &self.hidden,
                classes,
                unit,
                self.batch_norm,
                self.seed,
            ),
            Arch::Cnn => {
                let &[c, h, w] = sample_shape else {
                    return Err(CliError::Usage(format!(
                        "cnn needs [C, H, W] samples, dataset has {sample_shape:?} (try --dataset digits)"
                    )));
                };
                LayerGraph::cnn([c, h, w], &self.channels, classes, unit, self.seed)
            }
        }
        .map_err(|e| CliError::Usage(format!("invalid architecture: {e}")))?;
        Ok(g.with_encoding(self.encoding.into()))
    }

    pub fn optimizer(&self) -> Box<dyn Optimizer> {
        match self.optimizer {
            OptimizerChoice::Adam => Box::new(Adam::new(AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            })),
            OptimizerChoice::Sgd => Box::new(Sgd { lr: self.lr }),
        }
    }

    /// The resolved config as TOML, headed by the command that produced it.
    pub fn dump(&self, command: &str) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("# resolved config of `ibra {command}`\n{body}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_flags_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 9\nhidden = [4, 4]\n").unwrap();
        let flags = ConfigOverrides {
            seed: Some(3),
            lr: Some(0.5),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&flags, Some(&path)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.hidden, vec![4, 4]);
        assert_eq!(cfg.epochs, RunConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sed = 9\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(&ConfigOverrides::default(), Some(&path)),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig {
            data: Some("data/x".into()),
            ..Default::default()
        };
        let back: RunConfig = toml::from_str(&cfg.dump("train")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_neuron_rejected() {
        let flags = ConfigOverrides {
            neuron: Some(NeuronChoice::Ilif),
            d: Some(2.5),
            ..Default::default()
        };
        assert!(RunConfig::resolve(&flags, None).is_err());
    }
}
