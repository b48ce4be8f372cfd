//! Flat `key = value` configuration covering the network, training and EICA
//! settings. Blank lines and lines starting with `#` are ignored; unknown or
//! repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::eica::EicaConfig;
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, LEVELS};
use crate::training::{AugmentConfig, TrainConfig, DEFAULT_MASK_THRESHOLD};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eica: EicaConfig,
    pub mask_threshold: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eica: EicaConfig::default(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value::<usize>(key, v.trim()))
        .collect()
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{key}: expected HxW, got `{value}`")))?;
    Ok((parse_value(key, h.trim())?, parse_value(key, w.trim())?))
}

fn fmt_optional<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Splits text into `(line, key, value)` records.
fn records(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!("line {}: `{k}` given twice", i + 1)));
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

/// Returns `Ok(false)` when `key` is not a network key.
fn set_network(cfg: &mut NetworkConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "network.channels" => {
            let list = parse_list(key, v)?;
            cfg.channels = list.as_slice().try_into().map_err(|_| {
                Error::Config(format!("{key}: expected {LEVELS} values, got {}", list.len()))
            })?;
        }
        "network.input_size" => cfg.input_size = parse_size(key, v)?,
        "network.input_channels" => cfg.input_channels = parse_value(key, v)?,
        "network.dropout_rate" => cfg.dropout_rate = parse_value(key, v)?,
        "network.mha_orders" => cfg.mha_orders = parse_list(key, v)?,
        "network.encoder_single_order" => cfg.encoder_single_order = parse_optional(key, v)?,
        "network.decoder_single_order" => cfg.decoder_single_order = parse_optional(key, v)?,
        "network.alpha" => cfg.alpha = parse_value(key, v)?,
        "network.bias" => cfg.bias = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn aug(cfg: &mut TrainConfig) -> &mut AugmentConfig {
    cfg.augmentation.get_or_insert_with(AugmentConfig::default)
}

fn set_train(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "train.epochs" => cfg.epochs = parse_value(key, v)?,
        "train.batch_size" => cfg.batch_size = parse_value(key, v)?,
        "train.lr_init" => cfg.lr_init = parse_value(key, v)?,
        "train.lr_min" => cfg.lr_min = parse_value(key, v)?,
        "train.weight_decay" => cfg.weight_decay = parse_value(key, v)?,
        "train.beta1" => cfg.beta1 = parse_value(key, v)?,
        "train.beta2" => cfg.beta2 = parse_value(key, v)?,
        "train.adam_eps" => cfg.adam_eps = parse_value(key, v)?,
        "train.seed" => cfg.seed = parse_value(key, v)?,
        "train.augment" => {} // applied after all keys are read
        "train.hflip" => aug(cfg).hflip = parse_value(key, v)?,
        "train.vflip" => aug(cfg).vflip = parse_value(key, v)?,
        "train.max_rotation_deg" => aug(cfg).max_rotation_deg = parse_value(key, v)?,
        "train.bce_weight" => cfg.loss.bce_weight = parse_value(key, v)?,
        "train.dice_weight" => cfg.loss.dice_weight = parse_value(key, v)?,
        "train.dice_smooth" => cfg.loss.dice_smooth = parse_value(key, v)?,
        "train.stop_at_val_dsc" => cfg.stop_at_val_dsc = parse_optional(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_network(out: &mut String, n: &NetworkConfig) {
    let _ = writeln!(out, "network.channels = {}", join(&n.channels));
    let _ = writeln!(out, "network.input_size = {}x{}", n.input_size.0, n.input_size.1);
    let _ = writeln!(out, "network.input_channels = {}", n.input_channels);
    let _ = writeln!(out, "network.dropout_rate = {}", n.dropout_rate);
    let _ = writeln!(out, "network.mha_orders = {}", join(&n.mha_orders));
    let _ = writeln!(out, "network.encoder_single_order = {}", fmt_optional(&n.encoder_single_order));
    let _ = writeln!(out, "network.decoder_single_order = {}", fmt_optional(&n.decoder_single_order));
    let _ = writeln!(out, "network.alpha = {}", n.alpha);
    let _ = writeln!(out, "network.bias = {}", n.bias);
}

pub fn network_to_text(config: &NetworkConfig) -> String {
    let mut out = String::new();
    write_network(&mut out, config);
    out
}

/// Parses text holding only `network.*` keys; missing keys keep defaults.
pub fn network_from_text(text: &str) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::default();
    for (line, key, value) in records(text)? {
        if !set_network(&mut cfg, &key, &value)? {
            return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Parses and validates a configuration; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut augment = true;
        for (line, key, v) in records(text)? {
            let v = v.as_str();
            if set_network(&mut cfg.network, &key, v)? || set_train(&mut cfg.train, &key, v)? {
                if key == "train.augment" {
                    augment = parse_value(&key, v)?;
                }
                continue;
            }
            match key.as_str() {
                "data.mask_threshold" => cfg.mask_threshold = parse_value(&key, v)?,
                "eica.activation_threshold_frac" => cfg.eica.activation_threshold_frac = parse_value(&key, v)?,
                "eica.min_energy" => cfg.eica.min_energy = parse_value(&key, v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
            }
        }
        if !augment {
            cfg.train.augmentation = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.eica.validate()
    }

    /// Serialises every key; `parse(to_text())` reproduces the configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_network(&mut out, &self.network);
        let t = &self.train;
        let aug = t.augmentation.unwrap_or_default();
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.lr_init = {}", t.lr_init);
        let _ = writeln!(out, "train.lr_min = {}", t.lr_min);
        let _ = writeln!(out, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(out, "train.beta1 = {}", t.beta1);
        let _ = writeln!(out, "train.beta2 = {}", t.beta2);
        let _ = writeln!(out, "train.adam_eps = {}", t.adam_eps);
        let _ = writeln!(out, "train.seed = {}", t.seed);
        let _ = writeln!(out, "train.augment = {}", t.augmentation.is_some());
        let _ = writeln!(out, "train.hflip = {}", aug.hflip);
        let _ = writeln!(out, "train.vflip = {}", aug.vflip);
        let _ = writeln!(out, "train.max_rotation_deg = {}", aug.max_rotation_deg);
        let _ = writeln!(out, "train.bce_weight = {}", t.loss.bce_weight);
        let _ = writeln!(out, "train.dice_weight = {}", t.loss.dice_weight);
        let _ = writeln!(out, "train.dice_smooth = {}", t.loss.dice_smooth);
        let _ = writeln!(out, "train.stop_at_val_dsc = {}", fmt_optional(&t.stop_at_val_dsc));
        let _ = writeln!(out, "data.mask_threshold = {}", self.mask_threshold);
        let _ = writeln!(out, "eica.activation_threshold_frac = {}", self.eica.activation_threshold_frac);
        let _ = writeln!(out, "eica.min_energy = {}", self.eica.min_energy);
        out
    }
}
