use std::path::{Path, PathBuf};

use crate::aggregate::AggregationRule;
use crate::attack::{AttackConfig, AttackKind, DEFAULT_GAUSSIAN_VARIANCE};
use crate::data::{DataDistribution, DEFAULT_SEPARATION};
use crate::error::{Error, Result};
use crate::quant::SUPPORTED_BITS;
use crate::selection::{SelectionMode, WassersteinCap, DEFAULT_DELTA};
use crate::sstrain::DEFAULT_CONFIDENCE;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    Fixed(f64),
    /// MMD search over a grid scaled to each update.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        features: usize,
        separation: f64,
    },
    /// IDX files. Without a test pair, 20% of the training files is held out.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub server_samples: usize,
    pub lambda: f64,
    pub delta: f64,
    pub wasserstein_cap: WassersteinCap,
    /// `None` uploads raw 32-bit floats.
    pub quant_bits: Option<u8>,
    pub alpha: AlphaMode,
    pub aggregation: AggregationRule,
    pub selection: SelectionMode,
    pub attack: AttackConfig,
    pub distribution: DataDistribution,
    pub dataset: DatasetSource,
    pub test_fraction: f64,
    pub seed: u64,
    /// Write measured wall time; when off the column is 0 so that output is
    /// a pure function of the configuration.
    pub record_wall_time: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            clients: 100,
            participation: 0.1,
            rounds: 250,
            local_epochs: 5,
            learning_rate: 0.001,
            momentum: crate::model::DEFAULT_MOMENTUM,
            batch_size: 32,
            server_samples: 10_000,
            lambda: DEFAULT_CONFIDENCE,
            delta: DEFAULT_DELTA,
            wasserstein_cap: WassersteinCap::default(),
            quant_bits: Some(8),
            alpha: AlphaMode::Auto,
            aggregation: AggregationRule::gma(),
            selection: SelectionMode::Both,
            attack: AttackConfig::default(),
            distribution: DataDistribution::Iid,
            dataset: DatasetSource::Synthetic {
                classes: 10,
                per_class: 2_000,
                features: 16,
                separation: DEFAULT_SEPARATION,
            },
            test_fraction: 0.2,
            seed: 0,
            record_wall_time: false,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| field(key, format!("cannot parse {value:?}: {e}")))
}

impl SimConfig {
    /// Participants per round: `ceil(q * m)`.
    pub fn participants_per_round(&self) -> usize {
        ((self.participation * self.clients as f64).ceil() as usize).clamp(1, self.clients)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(field("clients", "must be positive"));
        }
        if !(self.participation > 0.0 && self.participation < 1.0) {
            return Err(field("participation", "must lie strictly between 0 and 1"));
        }
        if self.local_epochs == 0 {
            return Err(field("local-epochs", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(field("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(field("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(field("batch", "must be positive"));
        }
        if self.server_samples == 0 {
            return Err(field("server-samples", "must be positive"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(field("lambda", "must lie in (0, 1]"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(field("delta", "must lie in (0, 1]"));
        }
        match self.wasserstein_cap {
            WassersteinCap::MedianMultiple(k) | WassersteinCap::Fixed(k) if !(k >= 0.0) => {
                return Err(field("wasserstein-cap", "must be non-negative"));
            }
            _ => {}
        }
        if let Some(bits) = self.quant_bits {
            if !SUPPORTED_BITS.contains(&bits) {
                return Err(field("quant-bits", format!("must be one of {SUPPORTED_BITS:?} or off")));
            }
        }
        if let AlphaMode::Fixed(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(field("alpha", "must be positive"));
            }
        }
        if let AggregationRule::Gma {
            max_iter,
            tolerance,
        } = self.aggregation
        {
            if max_iter == 0 || !(tolerance > 0.0) {
                return Err(field("agg", "geometric median needs max_iter >= 1 and tolerance > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(field("test-fraction", "must lie in [0, 1)"));
        }
        let classes = match &self.dataset {
            DatasetSource::Synthetic { classes, .. } => *classes,
            DatasetSource::Mnist { .. } => 10,
        };
        self.attack.validate(self.clients, classes)
    }

    /// Applies one `key=value` setting. Keys are the CLI flag names without
    /// the leading dashes.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "clients" => self.clients = parse_num(key, value)?,
            "participation" => self.participation = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "local-epochs" => self.local_epochs = parse_num(key, value)?,
            "lr" => self.learning_rate = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "batch" => self.batch_size = parse_num(key, value)?,
            "server-samples" => self.server_samples = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "delta" => self.delta = parse_num(key, value)?,
            "wasserstein-cap" => {
                self.wasserstein_cap = match value.strip_prefix("median*") {
                    Some(k) => WassersteinCap::MedianMultiple(parse_num(key, k)?),
                    None => WassersteinCap::Fixed(parse_num(key, value)?),
                }
            }
            "quant-bits" => {
                self.quant_bits = match value {
                    "off" | "32" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "alpha" => {
                self.alpha = match value {
                    "auto" => AlphaMode::Auto,
                    v => AlphaMode::Fixed(parse_num(key, v)?),
                }
            }
            "agg" => {
                self.aggregation = match value {
                    "fedavg" => AggregationRule::FedAvg,
                    "fedsgd" => AggregationRule::FedSgd,
                    "gma" => AggregationRule::gma(),
                    v => return Err(field(key, format!("unknown rule {v:?}"))),
                }
            }
            "selection" => {
                self.selection = match value {
                    "off" => SelectionMode::Off,
                    "cosine" => SelectionMode::Cosine,
                    "wasserstein" => SelectionMode::Wasserstein,
                    "both" => SelectionMode::Both,
                    v => return Err(field(key, format!("unknown mode {v:?}"))),
                }
            }
            "attack" => {
                self.attack.kind = match value {
                    "none" => AttackKind::None,
                    "label-flip" => AttackKind::LabelFlip { from: 1, to: 7 },
                    "gaussian" => AttackKind::Gaussian {
                        variance: DEFAULT_GAUSSIAN_VARIANCE,
                    },
                    v => return Err(field(key, format!("unknown attack {v:?}"))),
                }
            }
            "malicious" => self.attack.malicious = parse_num(key, value)?,
            "flip-from" | "flip-to" => {
                let class: usize = parse_num(key, value)?;
                match &mut self.attack.kind {
                    AttackKind::LabelFlip { from, to } => {
                        if key == "flip-from" {
                            *from = class;
                        } else {
                            *to = class;
                        }
                    }
                    _ => return Err(field(key, "requires attack=label-flip set first")),
                }
            }
            "variance" => match &mut self.attack.kind {
                AttackKind::Gaussian { variance } => *variance = parse_num(key, value)?,
                _ => return Err(field(key, "requires attack=gaussian set first")),
            },
            "dist" => {
                self.distribution = match value {
                    "iid" => DataDistribution::Iid,
                    "non-iid" => DataDistribution::NonIid,
                    v => return Err(field(key, format!("unknown distribution {v:?}"))),
                }
            }
            "dataset" => self.dataset = parse_dataset(value)?,
            "classes" | "per-class" | "features" | "separation" => match &mut self.dataset {
                DatasetSource::Synthetic {
                    classes,
                    per_class,
                    features,
                    separation,
                } => match key {
                    "classes" => *classes = parse_num(key, value)?,
                    "per-class" => *per_class = parse_num(key, value)?,
                    "features" => *features = parse_num(key, value)?,
                    _ => *separation = parse_num(key, value)?,
                },
                DatasetSource::Mnist { .. } => {
                    return Err(field(key, "only applies to the synthetic dataset"))
                }
            },
            "test-fraction" => self.test_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "wall-clock" => self.record_wall_time = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file; `#` starts a comment.
    pub fn apply_file_contents(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<SimConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = SimConfig::default();
        cfg.apply_file_contents(&text)?;
        Ok(cfg)
    }
}

fn parse_dataset(value: &str) -> Result<DatasetSource> {
    if value == "synthetic" {
        return Ok(SimConfig::default().dataset);
    }
    let paths = value
        .strip_prefix("mnist:")
        .ok_or_else(|| field("dataset", format!("expected synthetic or mnist:<img>,<lbl>, got {value:?}")))?;
    let parts: Vec<PathBuf> = paths.split(',').map(|p| PathBuf::from(p.trim())).collect();
    match parts.as_slice() {
        [img, lbl] => Ok(DatasetSource::Mnist {
            images: img.clone(),
            labels: lbl.clone(),
            test: None,
        }),
        [img, lbl, timg, tlbl] => Ok(DatasetSource::Mnist {
            images: img.clone(),
            labels: lbl.clone(),
            test: Some((timg.clone(), tlbl.clone())),
        }),
        _ => Err(field("dataset", "mnist takes <img>,<lbl> or <img>,<lbl>,<test-img>,<test-lbl>")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = SimConfig::default();
        assert_eq!(c.clients, 100);
        assert_eq!(c.participants_per_round(), 10);
        assert_eq!(c.rounds, 250);
        assert_eq!(c.local_epochs, 5);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.server_samples, 10_000);
        assert_eq!(c.lambda, 0.95);
        assert_eq!(c.delta, 0.90);
        c.validate().unwrap();
    }

    #[test]
    fn file_then_overrides() {
        let mut c = SimConfig::default();
        c.apply_file_contents(
            "# scenario\nclients = 20\nparticipation=0.5\nattack=gaussian\nmalicious=6\nquant-bits=off\nagg=fedavg\nselection=cosine\ndataset=mnist:a.idx,b.idx\n",
        )
        .unwrap();
        assert_eq!(c.clients, 20);
        assert_eq!(c.participants_per_round(), 10);
        assert_eq!(c.attack.kind, AttackKind::Gaussian { variance: 10.0 });
        assert_eq!(c.quant_bits, None);
        assert_eq!(c.aggregation, AggregationRule::FedAvg);
        assert_eq!(c.selection, SelectionMode::Cosine);
        assert!(matches!(c.dataset, DatasetSource::Mnist { test: None, .. }));
        c.apply("clients", "30").unwrap();
        assert_eq!(c.clients, 30);
    }

    #[test]
    fn violations_name_the_field() {
        let c = SimConfig { participation: 1.0, ..SimConfig::default() };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("participation"), "{msg}");

        let c = SimConfig { quant_bits: Some(3), ..SimConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("quant-bits"));

        let mut c = SimConfig::default();
        assert!(c.apply("lr", "fast").unwrap_err().to_string().contains("lr"));
        assert!(c.apply("bogus", "1").is_err());
        assert!(c.apply("flip-from", "2").is_err());
    }
}
