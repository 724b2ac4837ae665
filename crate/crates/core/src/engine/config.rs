//! Run configuration: one flat key/value namespace shared by every
//! subcommand, loadable from a file and overridable per key.
//!
//! File format: `key = value` lines, `#` starts a comment, blank lines are
//! skipped. Later assignments win, so command-line overrides are applied
//! simply by re-applying keys after the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_classes: u32,
    pub input_dim: u32,
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,

    /// Teacher views per sample.
    pub views: u32,
    pub aug_noise: f64,
    pub aug_scale_lo: f64,
    pub aug_scale_hi: f64,
    pub aug_jitter: f64,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub val_ratio: f64,
    pub eval_batch: usize,

    pub ema_decay: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rescue_fraction: f64,

    /// Ablation: plain cross-entropy on every pseudo-label, no selection,
    /// no curriculum, no auxiliary losses. The teacher still tracks the
    /// student by moving average.
    pub all_pseudo_baseline: bool,

    pub seg_percentile: f64,
    pub seg_ema_decay: f64,
    pub maps_per_batch: usize,
    pub map_height: usize,
    pub map_width: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_classes: 4,
            input_dim: 8,
            hidden_dims: vec![64, 64],
            bottleneck_dim: 32,
            proj_hidden: 64,
            proj_dim: 32,
            views: 12,
            aug_noise: 0.15,
            aug_scale_lo: 0.9,
            aug_scale_hi: 1.1,
            aug_jitter: 0.1,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-3,
            batch_size: 64,
            epochs: 30,
            pretrain_epochs: 50,
            val_ratio: 0.1,
            eval_batch: 256,
            ema_decay: 0.98,
            kappa: 0.1,
            alpha: 0.005,
            beta: 1e-4,
            rescue_fraction: 0.0,
            all_pseudo_baseline: false,
            seg_percentile: 55.0,
            seg_ema_decay: 0.995,
            maps_per_batch: 2,
            map_height: 16,
            map_width: 16,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean {other:?} for key {key:?}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "hidden_dims" => {
                self.hidden_dims = value
                    .split(',')
                    .map(|p| parse::<usize>(key, p))
                    .collect::<Result<_>>()?
            }
            "bottleneck_dim" => self.bottleneck_dim = parse(key, value)?,
            "proj_hidden" => self.proj_hidden = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            "views" => self.views = parse(key, value)?,
            "aug_noise" => self.aug_noise = parse(key, value)?,
            "aug_scale_lo" => self.aug_scale_lo = parse(key, value)?,
            "aug_scale_hi" => self.aug_scale_hi = parse(key, value)?,
            "aug_jitter" => self.aug_jitter = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "val_ratio" => self.val_ratio = parse(key, value)?,
            "eval_batch" => self.eval_batch = parse(key, value)?,
            "ema_decay" => self.ema_decay = parse(key, value)?,
            "kappa" => self.kappa = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "rescue_fraction" => self.rescue_fraction = parse(key, value)?,
            "all_pseudo_baseline" => self.all_pseudo_baseline = parse_bool(key, value)?,
            "seg_percentile" => self.seg_percentile = parse(key, value)?,
            "seg_ema_decay" => self.seg_ema_decay = parse(key, value)?,
            "maps_per_batch" => self.maps_per_batch = parse(key, value)?,
            "map_height" => self.map_height = parse(key, value)?,
            "map_width" => self.map_width = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in a config file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&h| h == 0) {
            return bad(format!("hidden_dims must be nonempty and positive, got {:?}", self.hidden_dims));
        }
        if self.bottleneck_dim == 0 || self.proj_hidden == 0 || self.proj_dim == 0 {
            return bad("embedding dimensions must be positive".into());
        }
        if self.views == 0 {
            return bad("views must be at least 1".into());
        }
        if !(self.aug_noise >= 0.0) || !(self.aug_jitter >= 0.0) {
            return bad("augmentation magnitudes must be non-negative".into());
        }
        if !(self.aug_scale_lo > 0.0 && self.aug_scale_hi >= self.aug_scale_lo) {
            return bad(format!(
                "augmentation scale range [{}, {}] is invalid",
                self.aug_scale_lo, self.aug_scale_hi
            ));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return bad("epoch counts must be positive".into());
        }
        if !(0.0 < self.val_ratio && self.val_ratio < 1.0) {
            return bad(format!("val_ratio must lie strictly between 0 and 1, got {}", self.val_ratio));
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.seg_ema_decay) {
            return bad("moving-average decays must lie in [0, 1]".into());
        }
        if !(self.kappa > 0.0) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("curriculum rates must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.rescue_fraction) {
            return bad(format!("rescue_fraction must lie in [0, 1], got {}", self.rescue_fraction));
        }
        if !(0.0 < self.seg_percentile && self.seg_percentile <= 100.0) {
            return bad(format!("seg_percentile must lie in (0, 100], got {}", self.seg_percentile));
        }
        if self.maps_per_batch == 0 || self.map_height == 0 || self.map_width == 0 {
            return bad("map batch geometry must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim as usize,
            hidden_dims: self.hidden_dims.clone(),
            bottleneck_dim: self.bottleneck_dim,
            num_classes: self.num_classes as usize,
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_assignments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\nlr = 0.01\nhidden_dims = 32,16\n\nbatch_size = 8 # trailing note\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.hidden_dims, vec![32, 16]);
        assert_eq!(cfg.batch_size, 8);
        cfg.apply("lr", "0.5").unwrap();
        assert_eq!(cfg.lr, 0.5, "later assignment wins");
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply("no_such_key", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply("lr", "fast"), Err(Error::Config(_))));
        cfg.apply("momentum", "1.5").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_lines_are_rejected_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "lr 0.01\n").unwrap();
        let mut cfg = RunConfig::default();
        let err = cfg.apply_file(&path).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }
}
