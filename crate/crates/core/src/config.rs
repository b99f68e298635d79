//! Flat `key = value` run configuration.
//!
//! Every key in [`KEYS`] has a default; unknown keys are errors carrying the
//! closest known key. Blank lines and lines starting with `#` are ignored.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::freq::{FreqConfig, WaveletFamily};
use crate::fusion::Modality;
use crate::time_branch::EmaConfig;
use crate::vision::VisionConfig;

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "model.lookback",
    "model.horizon",
    "revin.eps",
    "time.enabled",
    "time.alpha",
    "freq.enabled",
    "freq.wavelet",
    "freq.levels",
    "freq.patch_len",
    "freq.d_model",
    "vision.enabled",
    "vision.period",
    "vision.patch",
    "vision.depth",
    "vision.d_model",
    "vision.d_state",
    "vision.expand",
    "fusion.gating",
    "fusion.hidden",
    "trainer.batch_size",
    "trainer.lr",
    "trainer.lr_decay",
    "trainer.decay_after",
    "trainer.max_epochs",
    "trainer.patience",
    "trainer.clip_norm",
    "trainer.seed",
    "trainer.stride",
    "data.date_column",
    "stats.sma_window",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub lookback: usize,
    pub horizon: usize,
    pub revin_eps: f64,
    pub time_enabled: bool,
    pub time_alpha: f64,
    pub freq_enabled: bool,
    pub wavelet: WaveletFamily,
    pub freq_levels: usize,
    pub freq_patch_len: usize,
    pub freq_d_model: usize,
    pub vision_enabled: bool,
    /// 0 means detect from the training split.
    pub vision_period: usize,
    pub vision_patch: usize,
    pub vision_depth: usize,
    pub vision_d_model: usize,
    pub vision_d_state: usize,
    pub vision_expand: usize,
    pub gating: bool,
    pub gate_hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs run at the base rate before decay starts.
    pub decay_after: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Step between consecutive training windows.
    pub stride: usize,
    pub date_column: String,
    pub sma_window: usize,
}

impl Default for Config {
    fn default() -> Self {
        let freq = FreqConfig::default();
        let vision = VisionConfig::default();
        Self {
            lookback: 96,
            horizon: 96,
            revin_eps: 1e-5,
            time_enabled: true,
            time_alpha: EmaConfig::default().alpha,
            freq_enabled: true,
            wavelet: freq.wavelet,
            freq_levels: freq.levels,
            freq_patch_len: freq.patch_len,
            freq_d_model: freq.d_model,
            vision_enabled: true,
            vision_period: 0,
            vision_patch: vision.patch,
            vision_depth: vision.depth,
            vision_d_model: vision.d_model,
            vision_d_state: vision.d_state,
            vision_expand: vision.expand,
            gating: true,
            gate_hidden: 32,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 0.9,
            decay_after: 3,
            max_epochs: 20,
            patience: 5,
            clip_norm: 5.0,
            seed: 2024,
            stride: 1,
            date_column: "date".into(),
            sma_window: 25,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

/// Closest known key by edit distance, if reasonably close.
pub fn suggest_key(key: &str) -> Option<String> {
    KEYS.iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, k)| k.to_string())
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.lookback" => self.lookback = parse_value(key, v)?,
            "model.horizon" => self.horizon = parse_value(key, v)?,
            "revin.eps" => self.revin_eps = parse_value(key, v)?,
            "time.enabled" => self.time_enabled = parse_value(key, v)?,
            "time.alpha" => self.time_alpha = parse_value(key, v)?,
            "freq.enabled" => self.freq_enabled = parse_value(key, v)?,
            "freq.wavelet" => self.wavelet = v.parse()?,
            "freq.levels" => self.freq_levels = parse_value(key, v)?,
            "freq.patch_len" => self.freq_patch_len = parse_value(key, v)?,
            "freq.d_model" => self.freq_d_model = parse_value(key, v)?,
            "vision.enabled" => self.vision_enabled = parse_value(key, v)?,
            "vision.period" => self.vision_period = parse_value(key, v)?,
            "vision.patch" => self.vision_patch = parse_value(key, v)?,
            "vision.depth" => self.vision_depth = parse_value(key, v)?,
            "vision.d_model" => self.vision_d_model = parse_value(key, v)?,
            "vision.d_state" => self.vision_d_state = parse_value(key, v)?,
            "vision.expand" => self.vision_expand = parse_value(key, v)?,
            "fusion.gating" => self.gating = parse_value(key, v)?,
            "fusion.hidden" => self.gate_hidden = parse_value(key, v)?,
            "trainer.batch_size" => self.batch_size = parse_value(key, v)?,
            "trainer.lr" => self.lr = parse_value(key, v)?,
            "trainer.lr_decay" => self.lr_decay = parse_value(key, v)?,
            "trainer.decay_after" => self.decay_after = parse_value(key, v)?,
            "trainer.max_epochs" => self.max_epochs = parse_value(key, v)?,
            "trainer.patience" => self.patience = parse_value(key, v)?,
            "trainer.clip_norm" => self.clip_norm = parse_value(key, v)?,
            "trainer.seed" => self.seed = parse_value(key, v)?,
            "trainer.stride" => self.stride = parse_value(key, v)?,
            "data.date_column" => self.date_column = v.to_string(),
            "stats.sma_window" => self.sma_window = parse_value(key, v)?,
            other => {
                return Err(Error::UnknownKey {
                    key: other.to_string(),
                    suggestion: suggest_key(other),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.lookback" => self.lookback.to_string(),
            "model.horizon" => self.horizon.to_string(),
            "revin.eps" => self.revin_eps.to_string(),
            "time.enabled" => self.time_enabled.to_string(),
            "time.alpha" => self.time_alpha.to_string(),
            "freq.enabled" => self.freq_enabled.to_string(),
            "freq.wavelet" => self.wavelet.to_string(),
            "freq.levels" => self.freq_levels.to_string(),
            "freq.patch_len" => self.freq_patch_len.to_string(),
            "freq.d_model" => self.freq_d_model.to_string(),
            "vision.enabled" => self.vision_enabled.to_string(),
            "vision.period" => self.vision_period.to_string(),
            "vision.patch" => self.vision_patch.to_string(),
            "vision.depth" => self.vision_depth.to_string(),
            "vision.d_model" => self.vision_d_model.to_string(),
            "vision.d_state" => self.vision_d_state.to_string(),
            "vision.expand" => self.vision_expand.to_string(),
            "fusion.gating" => self.gating.to_string(),
            "fusion.hidden" => self.gate_hidden.to_string(),
            "trainer.batch_size" => self.batch_size.to_string(),
            "trainer.lr" => self.lr.to_string(),
            "trainer.lr_decay" => self.lr_decay.to_string(),
            "trainer.decay_after" => self.decay_after.to_string(),
            "trainer.max_epochs" => self.max_epochs.to_string(),
            "trainer.patience" => self.patience.to_string(),
            "trainer.clip_norm" => self.clip_norm.to_string(),
            "trainer.seed" => self.seed.to_string(),
            "trainer.stride" => self.stride.to_string(),
            "data.date_column" => self.date_column.clone(),
            "stats.sma_window" => self.sma_window.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` text, one pair per line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn enabled(&self) -> Vec<Modality> {
        let flags = [self.time_enabled, self.freq_enabled, self.vision_enabled];
        Modality::ALL
            .into_iter()
            .zip(flags)
            .filter_map(|(m, on)| on.then_some(m))
            .collect()
    }

    pub fn set_enabled(&mut self, m: Modality, on: bool) {
        match m {
            Modality::Time => self.time_enabled = on,
            Modality::Freq => self.freq_enabled = on,
            Modality::Vision => self.vision_enabled = on,
        }
    }

    pub fn ema(&self) -> Result<EmaConfig> {
        EmaConfig::new(self.time_alpha)
    }

    pub fn freq(&self) -> FreqConfig {
        FreqConfig {
            wavelet: self.wavelet,
            levels: self.freq_levels,
            patch_len: self.freq_patch_len,
            d_model: self.freq_d_model,
            eps: self.revin_eps,
        }
    }

    pub fn vision(&self) -> VisionConfig {
        VisionConfig {
            patch: self.vision_patch,
            depth: self.vision_depth,
            d_model: self.vision_d_model,
            d_state: self.vision_d_state,
            expand: self.vision_expand,
        }
    }

    /// Range checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.lookback < 2 || self.horizon == 0 {
            return fail("model.lookback must be >= 2 and model.horizon >= 1".into());
        }
        if self.enabled().is_empty() {
            return fail("at least one of time/freq/vision must be enabled".into());
        }
        if self.batch_size == 0 {
            return fail("trainer.batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return fail("trainer.patience must be >= 1".into());
        }
        if self.stride == 0 {
            return fail("trainer.stride must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("trainer.lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("trainer.lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("trainer.clip_norm must be > 0, got {}", self.clip_norm));
        }
        if !(self.revin_eps > 0.0) {
            return fail("revin.eps must be > 0".into());
        }
        if self.gate_hidden == 0 {
            return fail("fusion.hidden must be >= 1".into());
        }
        if self.time_enabled {
            self.ema()?;
        }
        if self.vision_enabled && self.vision_period == 1 {
            return fail("vision.period must be 0 (auto) or >= 2".into());
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key} = {}", self.get(key).unwrap_or_default())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = Config::default();
        for key in KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
        let mut changed = cfg.clone();
        changed.set("time.alpha", "0.123456789").unwrap();
        changed.set("freq.wavelet", "haar").unwrap();
        changed.set("trainer.seed", "7").unwrap();
        assert_eq!(Config::from_text(&changed.to_string()).unwrap(), changed);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        match Config::from_text("freq.wavlet = db2") {
            Err(Error::UnknownKey { key, suggestion }) => {
                assert_eq!(key, "freq.wavlet");
                assert_eq!(suggestion.as_deref(), Some("freq.wavelet"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(suggest_key("completely.unrelated.thing"), None);
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = Config::from_text("# tiny\n\nmodel.horizon = 24\n  vision.enabled=false  \n").unwrap();
        assert_eq!(cfg.horizon, 24);
        assert!(!cfg.vision_enabled);
    }

    #[test]
    fn bad_values() {
        assert!(Config::from_text("trainer.lr = fast").is_err());
        assert!(Config::from_text("model.horizon").is_err());
        let mut cfg = Config::default();
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        for m in Modality::ALL {
            cfg.set_enabled(m, false);
        }
        assert!(cfg.validate().is_err());
    }
}
