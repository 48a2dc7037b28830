//! Run configuration: a TOML file with one section per module, plus
//! `key=value` overrides addressed by dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::ModelConfig;
use crate::topk::{AimleConfig, ImleConfig};
use crate::training::{EvalConfig, TrainConfig, TrainSettings};

/// Where training and evaluation data come from. Without paths, splits are
/// generated from `[synthetic]` and the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    /// Fraction of training examples that keep their gold rationale.
    pub gold_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            gold_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub imle: ImleConfig,
    pub aimle: AimleConfig,
    pub optim: AdamConfig,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

/// Keys that are valid overrides although absent from a default snapshot.
const OPTIONAL_KEYS: [&str; 3] = ["data.train", "data.dev", "weights.alpha_f"];

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// Applies one `section.key=value` override. The key must already exist.
    /// Values are read as TOML, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };

        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(format!("config snapshot: {e}")))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, sections) = parts.split_last().expect("split yields one part");
        let mut table = &mut root;
        for s in sections {
            table = match table.get_mut(*s) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            };
        }
        if !table.contains_key(*last) && !OPTIONAL_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if key == "weights.alpha_f" {
            table.remove("alpha_c");
            table.remove("alpha_s");
        }
        table.insert(last.to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {}", e.message())))?;
        Ok(())
    }

    /// File (or defaults), then overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            model: self.model.clone(),
            weights: self.weights.clone(),
            imle: self.imle,
            aimle: self.aimle,
            optim: self.optim,
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let f = self.data.gold_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("data.gold_fraction must be in [0, 1], got {f}")));
        }
        if self.data.train.is_some() != self.data.dev.is_some() {
            return Err(Error::Config("data.train and data.dev must be given together".into()));
        }
        if self.data.train.is_none() {
            self.synthetic.validate()?;
            if self.synthetic.vocab_size > self.model.vocab_size {
                return Err(Error::Config(format!(
                    "model.vocab_size {} is smaller than synthetic.vocab_size {}",
                    self.model.vocab_size, self.synthetic.vocab_size
                )));
            }
            if self.synthetic.num_classes != self.model.num_classes {
                return Err(Error::Config("synthetic.num_classes must equal model.num_classes".into()));
            }
        }
        Ok(())
    }

    /// Train and dev splits, before gold subsampling.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match (&self.data.train, &self.data.dev) {
            (Some(t), Some(d)) => {
                let m = Some(self.model.num_classes);
                Ok((data::load_jsonl(t, m)?.dataset, data::load_jsonl(d, m)?.dataset))
            }
            _ => data::synthetic_splits(&self.synthetic, self.seed),
        }
    }

    /// Training split with gold kept on `data.gold_fraction` of examples.
    pub fn training_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, dev) = self.datasets()?;
        let train = if self.data.gold_fraction < 1.0 {
            data::subsample_gold(&train, self.data.gold_fraction, self.seed)?
        } else {
            train
        };
        Ok((train, dev))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, Path::new("cfg.toml"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_fill_partially() {
        let cfg = parse("seed = 7\n[weights]\nalpha_f = 0.25\nk_set = [30, 60]\n[train]\nmax_epochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!((cfg.weights.alpha_c, cfg.weights.alpha_s), (0.25, 0.25));
        assert_eq!(cfg.weights.k_set.len(), 2);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = parse("seed = 1\n\n[model]\nembed_dim = 8\nhiden_dim = 4\n").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 5);
                assert!(message.contains("hiden_dim"), "{message}");
            }
            e => panic!("{e}"),
        }
        assert!(matches!(parse("[model\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("[weights]\nalpha_f = 1\nalpha_c = 1\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn overrides_replace_existing_keys_only() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.max_epochs=2").unwrap();
        cfg.apply_override("model.encoder=single-head-attention").unwrap();
        cfg.apply_override("weights.alpha_f = 0").unwrap();
        cfg.apply_override("data.train=a.jsonl").unwrap();
        cfg.apply_override("eval.aopc_bins=[10, 20.5]").unwrap();
        assert_eq!(cfg.train.max_epochs, 2);
        assert_eq!(cfg.model.encoder, crate::models::EncoderKind::SingleHeadAttention);
        assert!(!cfg.weights.faithfulness_enabled());
        assert_eq!(cfg.data.train.as_deref(), Some(Path::new("a.jsonl")));
        assert_eq!(cfg.eval.aopc_bins[1].get(), 20.5);

        for bad in ["train.epochs=2", "nosection.x=1", "seed.x=1", "train", "train.max_epochs=abc"] {
            assert!(matches!(cfg.clone().apply_override(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.optim.lr = 3e-4 / 7.0;
        cfg.data.train = Some("t.jsonl".into());
        cfg.data.dev = Some("d.jsonl".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }

    #[test]
    fn validation_checks_data_against_model() {
        assert!(RunConfig::default().validate().is_ok());
        let mut cfg = RunConfig::default();
        cfg.model.vocab_size = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.train = Some("t.jsonl".into());
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.gold_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }
}
