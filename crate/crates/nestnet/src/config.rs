//! Architecture files and the resolved run configuration.

use std::path::{Path, PathBuf};

use nestnet_core::training::{Precision, TrainConfig, WeightKind, DEFAULT_GAMMA};
use nestnet_core::{ArchDescriptor, HeadSites};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Head placement as written in files: `"every_block"`,
/// `"stem_and_every_block"` or an explicit list of positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HeadSitesSpec {
    Named(String),
    Explicit(Vec<usize>),
}

/// Serializable mirror of [`ArchDescriptor`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub input_hw: usize,
    pub stages: Vec<usize>,
    pub blocks: Vec<usize>,
    pub groups: usize,
    pub classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_sites")]
    pub head_sites: HeadSitesSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_kernel() -> usize {
    3
}

fn default_sites() -> HeadSitesSpec {
    HeadSitesSpec::Named("every_block".into())
}

impl From<&ArchDescriptor> for ArchSpec {
    fn from(a: &ArchDescriptor) -> Self {
        ArchSpec {
            input_channels: a.input_channels,
            input_hw: a.input_hw,
            stages: a.stages.clone(),
            blocks: a.blocks.clone(),
            groups: a.groups,
            classes: a.classes,
            kernel: a.kernel,
            head_sites: match &a.head_sites {
                HeadSites::EveryBlock => HeadSitesSpec::Named("every_block".into()),
                HeadSites::StemAndEveryBlock => HeadSitesSpec::Named("stem_and_every_block".into()),
                HeadSites::Explicit(p) => HeadSitesSpec::Explicit(p.clone()),
            },
            seed: a.seed,
        }
    }
}

impl ArchSpec {
    pub fn to_descriptor(&self) -> Result<ArchDescriptor, String> {
        let head_sites = match &self.head_sites {
            HeadSitesSpec::Named(n) if n == "every_block" => HeadSites::EveryBlock,
            HeadSitesSpec::Named(n) if n == "stem_and_every_block" => HeadSites::StemAndEveryBlock,
            HeadSitesSpec::Named(n) => return Err(format!("unknown head_sites {n:?}")),
            HeadSitesSpec::Explicit(p) => HeadSites::Explicit(p.clone()),
        };
        let a = ArchDescriptor {
            input_channels: self.input_channels,
            input_hw: self.input_hw,
            stages: self.stages.clone(),
            blocks: self.blocks.clone(),
            groups: self.groups,
            classes: self.classes,
            kernel: self.kernel,
            head_sites,
            seed: self.seed,
        };
        a.validate().map_err(|e| e.to_string())?;
        Ok(a)
    }
}

/// `toy`, `resnet32` or a path to a TOML architecture file.
pub fn resolve_arch(arg: &str) -> Result<ArchDescriptor, Failure> {
    match arg {
        "toy" => Ok(ArchDescriptor::toy(3)),
        "resnet32" => Ok(ArchDescriptor::resnet32_cifar()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
            let spec: ArchSpec = toml::from_str(&text).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
            spec.to_descriptor().map_err(|e| Failure::Config(format!("{path}: {e}")))
        }
    }
}

/// Where training and evaluation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// `synth` or `cifar10:DIR`.
    pub source: String,
    #[serde(default = "default_train")]
    pub train_count: usize,
    #[serde(default = "default_test")]
    pub test_count: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_train() -> usize {
    600
}

fn default_test() -> usize {
    300
}

fn default_noise() -> f64 {
    0.3
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: "synth".into(),
            train_count: default_train(),
            test_count: default_test(),
            noise: default_noise(),
        }
    }
}

/// Loss-weight choice as accepted by `--lambda`.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSpec {
    Flat,
    Descend,
    Ascend,
    Custom(PathBuf),
    Pick { l: usize, c: usize, k: f64 },
}

impl std::str::FromStr for LambdaSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "flat" => LambdaSpec::Flat,
            "descend" => LambdaSpec::Descend,
            "ascend" => LambdaSpec::Ascend,
            _ => {
                if let Some(p) = s.strip_prefix("custom:") {
                    LambdaSpec::Custom(PathBuf::from(p))
                } else if let Some(rest) = s.strip_prefix("pick:") {
                    let parts: Vec<&str> = rest.split(',').collect();
                    let [l, c, k] = parts[..] else {
                        return Err(format!("expected pick:L,C,K, got {s:?}"));
                    };
                    let bad = |v: &str| format!("bad number {v:?} in {s:?}");
                    LambdaSpec::Pick {
                        l: l.trim().parse().map_err(|_| bad(l))?,
                        c: c.trim().parse().map_err(|_| bad(c))?,
                        k: k.trim().parse().map_err(|_| bad(k))?,
                    }
                } else {
                    return Err(format!("unknown lambda {s:?}; use flat, descend, ascend, custom:FILE or pick:L,C,K"));
                }
            }
        })
    }
}

impl std::fmt::Display for LambdaSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaSpec::Flat => f.write_str("flat"),
            LambdaSpec::Descend => f.write_str("descend"),
            LambdaSpec::Ascend => f.write_str("ascend"),
            LambdaSpec::Custom(p) => write!(f, "custom:{}", p.display()),
            LambdaSpec::Pick { l, c, k } => write!(f, "pick:{l},{c},{k}"),
        }
    }
}

impl LambdaSpec {
    pub fn kind(&self, gamma: f64) -> Result<WeightKind, Failure> {
        Ok(match self {
            LambdaSpec::Flat => WeightKind::Flat,
            LambdaSpec::Descend => WeightKind::Descend { gamma },
            LambdaSpec::Ascend => WeightKind::Ascend { gamma },
            LambdaSpec::Custom(_) => WeightKind::Custom,
            LambdaSpec::Pick { l, c, k } => WeightKind::SinglePick {
                l: *l,
                c: *c,
                weight: *k,
                base: 1.0,
            },
        })
    }
}

/// Everything a `train` run needs, after merging the config file with flag
/// overrides. Written next to the outputs as `config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub data: DataSpec,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `(fraction of steps, factor)` pairs.
    pub decay: Vec<(f64, f64)>,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda: String,
    pub gamma: f64,
    pub precision: String,
    pub eval_every: usize,
    pub out: PathBuf,
}

/// Optional overrides read from `--config FILE`; unset fields fall back to
/// the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialRunConfig {
    pub arch: Option<ArchSpec>,
    pub data: Option<DataSpec>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub decay: Option<Vec<(f64, f64)>>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub lambda: Option<String>,
    pub gamma: Option<f64>,
    pub precision: Option<String>,
    pub eval_every: Option<usize>,
    pub out: Option<PathBuf>,
}

impl PartialRunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    /// Fills every unset field with its default.
    pub fn resolve(self, default_out: PathBuf) -> RunConfig {
        let defaults = TrainConfig::with_steps(2000);
        RunConfig {
            arch: self.arch.unwrap_or_else(|| ArchSpec::from(&ArchDescriptor::toy(3))),
            data: self.data.unwrap_or_default(),
            steps: self.steps.unwrap_or(defaults.steps),
            batch: self.batch.unwrap_or(defaults.batch_size),
            lr: self.lr.unwrap_or(defaults.learning_rate),
            momentum: self.momentum.unwrap_or(defaults.momentum),
            decay: self.decay.unwrap_or_else(|| vec![(0.6, 0.1), (0.8, 0.1)]),
            weight_decay: self.weight_decay.unwrap_or(0.0),
            seed: self.seed.unwrap_or(0),
            lambda: self.lambda.unwrap_or_else(|| "flat".into()),
            gamma: self.gamma.unwrap_or(DEFAULT_GAMMA),
            precision: self.precision.unwrap_or_else(|| "f32".into()),
            eval_every: self.eval_every.unwrap_or(0),
            out: self.out.unwrap_or(default_out),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let precision = match self.precision.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            p => return Err(Failure::Config(format!("precision must be f32 or f64, got {p:?}"))),
        };
        let mut decay = Vec::with_capacity(self.decay.len());
        for &(at, factor) in &self.decay {
            if !(0.0..=1.0).contains(&at) {
                return Err(Failure::Config(format!("decay point {at} is not a fraction of the run")));
            }
            decay.push(((at * self.steps as f64).round() as usize, factor));
        }
        let cfg = TrainConfig {
            batch_size: self.batch,
            momentum: self.momentum,
            learning_rate: self.lr,
            decay,
            steps: self.steps,
            seed: self.seed,
            weight_decay: self.weight_decay,
            eval_every: self.eval_every,
            precision,
        };
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn lambda(&self) -> Result<LambdaSpec, Failure> {
        self.lambda.parse().map_err(Failure::Config)
    }
}

/// Parses `0.6:0.1,0.8:0.1` (fraction of the run : factor).
pub fn parse_decay(s: &str) -> Result<Vec<(f64, f64)>, String> {
    if s.trim().is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| {
            let (at, factor) = item
                .split_once(':')
                .ok_or_else(|| format!("expected FRACTION:FACTOR, got {item:?}"))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad number {v:?}"));
            Ok((num(at)?, num(factor)?))
        })
        .collect()
}
