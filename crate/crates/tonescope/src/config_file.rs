//! `key = value` run configuration. `#` starts a comment.

use std::fmt::Write as _;

use thiserror::Error;
use tonescope_core::model::{ConvBlock, InputSize, LinearBlock, ModelConfig};
use tonescope_core::optim::OptimizerKind;
use tonescope_core::sampler::{Strategy, DEFAULT_VALIDATION_FRACTION};
use tonescope_core::trainer::{EarlyStop, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// Everything a run needs besides the dataset and output paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub validation_fraction: f64,
    pub stratify: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            strategy: Strategy::Imbalanced,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            stratify: false,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list item `{s}`")))
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad number `{v}`"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("bad boolean `{v}`")),
    }
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "conv_blocks" => {
                m.conv_blocks = list::<usize>(value)?
                    .into_iter()
                    .map(|out_features| ConvBlock { out_features })
                    .collect()
            }
            "linear_units" => {
                let p = m.linear_blocks.first().map_or(0.5, |b| b.dropout_p);
                m.linear_blocks = list::<usize>(value)?
                    .into_iter()
                    .map(|units| LinearBlock {
                        units,
                        dropout_p: p,
                    })
                    .collect()
            }
            "dropout" => {
                let ps: Vec<f64> = list(value)?;
                match ps.len() {
                    1 => m.linear_blocks.iter_mut().for_each(|b| b.dropout_p = ps[0]),
                    n if n == m.linear_blocks.len() => m
                        .linear_blocks
                        .iter_mut()
                        .zip(ps)
                        .for_each(|(b, p)| b.dropout_p = p),
                    n => {
                        return Err(format!(
                            "{n} dropout values for {} linear blocks",
                            m.linear_blocks.len()
                        ))
                    }
                }
            }
            "input_side" => {
                let side = num(value)?;
                m.input_size = InputSize {
                    height: side,
                    width: side,
                    channels: m.input_size.channels,
                }
            }
            "input_channels" => m.input_size.channels = num(value)?,
            "learning_rate" => m.learning_rate = num(value)?,
            "optimizer" => {
                m.optimizer =
                    OptimizerKind::parse(value).ok_or(format!("unknown optimizer `{value}`"))?
            }
            "max_epochs" => t.max_epochs = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "seed" => t.seed = num(value)?,
            "epsilon" => t.epsilon = num(value)?,
            "early_stop" => {
                t.early_stop = if flag(value)? {
                    Some(t.early_stop.unwrap_or_default())
                } else {
                    None
                }
            }
            "early_stop_window" => {
                t.early_stop.get_or_insert_with(EarlyStop::default).window = num(value)?
            }
            "early_stop_tolerance" => {
                t.early_stop
                    .get_or_insert_with(EarlyStop::default)
                    .slope_tolerance = num(value)?
            }
            "strategy" => {
                self.strategy =
                    Strategy::parse(value).ok_or(format!("unknown strategy `{value}`"))?
            }
            "validation_fraction" => self.validation_fraction = num(value)?,
            "stratify" => self.stratify = flag(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError {
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    /// Every key, in a fixed order. `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "conv_blocks",
            join(m.conv_blocks.iter().map(|b| b.out_features)),
        );
        kv(
            "linear_units",
            join(m.linear_blocks.iter().map(|b| b.units)),
        );
        kv("dropout", join(m.linear_blocks.iter().map(|b| b.dropout_p)));
        kv("input_side", m.input_size.height.to_string());
        kv("input_channels", m.input_size.channels.to_string());
        kv("learning_rate", m.learning_rate.to_string());
        kv("optimizer", m.optimizer.name().to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("epsilon", t.epsilon.to_string());
        kv("early_stop", t.early_stop.is_some().to_string());
        if let Some(es) = t.early_stop {
            kv("early_stop_window", es.window.to_string());
            kv("early_stop_tolerance", es.slope_tolerance.to_string());
        }
        kv("strategy", self.strategy.name().to_string());
        kv("validation_fraction", self.validation_fraction.to_string());
        kv("stratify", self.stratify.to_string());
        s
    }
}
