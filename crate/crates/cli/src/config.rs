//! Flat `key = value` run configuration. `#` starts a comment; unknown or
//! repeated keys are errors. Every key has a default, so an empty file is the
//! reference training recipe.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ucmnet::data::{AugmentConfig, DEFAULT_SPLIT_RATIO};
use ucmnet::loss::{BaseLoss, LossConfig};
use ucmnet::model::{BlockKind, NetworkConfig, NUM_DECODER_STAGES, NUM_STAGES};
use ucmnet::train::{AdamWConfig, CosineSchedule, ScheduleMode, TrainConfig};

#[derive(Debug, thiserror::Error)]
#[error("{origin}: {msg}")]
pub struct ConfigError {
    pub origin: String,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub t_max: u64,
    pub eta_min: f64,
    pub schedule: ScheduleMode,
    pub image_size: usize,
    pub input_channels: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub block_kind: BlockKind,
    pub deep_supervision: bool,
    pub ucm_encoder: [bool; NUM_STAGES],
    pub ucm_decoder: [bool; NUM_DECODER_STAGES],
    pub leaky_slope: f64,
    pub smooth: f64,
    pub stage_weights: [f64; 5],
    pub base_loss: BaseLoss,
    pub augment: bool,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotation_max: f64,
    pub threshold: f64,
    pub split_ratio: f64,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentConfig::default();
        let loss = LossConfig::default();
        RunConfig {
            seed: train.seed,
            epochs: train.epochs,
            batch_size: train.batch_size,
            eval_batch: train.eval_batch,
            lr: train.schedule.lr0,
            weight_decay: train.optim.weight_decay,
            beta1: train.optim.beta1,
            beta2: train.optim.beta2,
            adam_eps: train.optim.eps,
            t_max: train.schedule.t_max,
            eta_min: train.schedule.eta_min,
            schedule: train.schedule.mode,
            image_size: net.input_size.0,
            input_channels: net.input_channels,
            stage_channels: net.stage_channels,
            block_kind: net.block_kind,
            deep_supervision: net.deep_supervision,
            ucm_encoder: net.ucm_encoder,
            ucm_decoder: net.ucm_decoder,
            leaky_slope: net.leaky_slope,
            smooth: loss.smooth,
            stage_weights: loss.stage_weights,
            base_loss: loss.base_loss,
            augment: aug.enabled,
            hflip_p: aug.hflip_p,
            vflip_p: aug.vflip_p,
            rotation_max: aug.rotation_max,
            threshold: train.threshold,
            split_ratio: DEFAULT_SPLIT_RATIO,
            manifest: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn scalar<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn list<T, const N: usize>(v: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<[T; N], String> {
    let items = v.split(',').map(|s| item(s.trim())).collect::<Result<Vec<T>, _>>()?;
    let n = items.len();
    items.try_into().map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let err = |msg: String| ConfigError {
                origin: format!("{origin}:{}", no + 1),
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key `{key}` given twice")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate().map_err(|msg| ConfigError {
            origin: origin.to_string(),
            msg,
        })?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = scalar(v)?,
            "epochs" => self.epochs = scalar(v)?,
            "batch_size" => self.batch_size = scalar(v)?,
            "eval_batch" => self.eval_batch = scalar(v)?,
            "lr" => self.lr = scalar(v)?,
            "weight_decay" => self.weight_decay = scalar(v)?,
            "beta1" => self.beta1 = scalar(v)?,
            "beta2" => self.beta2 = scalar(v)?,
            "adam_eps" => self.adam_eps = scalar(v)?,
            "t_max" => self.t_max = scalar(v)?,
            "eta_min" => self.eta_min = scalar(v)?,
            "schedule" => self.schedule = v.parse().map_err(|e: ucmnet::train::TrainError| e.to_string())?,
            "image_size" => self.image_size = scalar(v)?,
            "input_channels" => self.input_channels = scalar(v)?,
            "stage_channels" => self.stage_channels = list(v, scalar)?,
            "block_kind" => self.block_kind = v.parse().map_err(|e: ucmnet::ModelError| e.to_string())?,
            "deep_supervision" => self.deep_supervision = boolean(v)?,
            "ucm_encoder" => self.ucm_encoder = list(v, boolean)?,
            "ucm_decoder" => self.ucm_decoder = list(v, boolean)?,
            "leaky_slope" => self.leaky_slope = scalar(v)?,
            "smooth" => self.smooth = scalar(v)?,
            "stage_weights" => self.stage_weights = list(v, scalar)?,
            "base_loss" => self.base_loss = v.parse().map_err(|e: ucmnet::LossError| e.to_string())?,
            "augment" => self.augment = boolean(v)?,
            "hflip_p" => self.hflip_p = scalar(v)?,
            "vflip_p" => self.vflip_p = scalar(v)?,
            "rotation_max" => self.rotation_max = scalar(v)?,
            "threshold" => self.threshold = scalar(v)?,
            "split_ratio" => self.split_ratio = scalar(v)?,
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.network().validate().map_err(|e| e.to_string())?;
        self.train().validate().map_err(|e| e.to_string())?;
        for (name, p) in [("hflip_p", self.hflip_p), ("vflip_p", self.vflip_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0,1]"));
            }
        }
        if !(self.rotation_max >= 0.0 && self.rotation_max <= 360.0) {
            return Err("rotation_max must lie in [0,360]".into());
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err("split_ratio must lie in [0,1]".into());
        }
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            stage_channels: self.stage_channels,
            input_channels: self.input_channels,
            input_size: (self.image_size, self.image_size),
            block_kind: self.block_kind,
            deep_supervision: self.deep_supervision,
            ucm_encoder: self.ucm_encoder,
            ucm_decoder: self.ucm_decoder,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_batch: self.eval_batch,
            schedule: CosineSchedule {
                lr0: self.lr,
                t_max: self.t_max,
                eta_min: self.eta_min,
                mode: self.schedule,
            },
            optim: AdamWConfig {
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            loss: LossConfig {
                smooth: self.smooth,
                stage_weights: self.stage_weights,
                base_loss: self.base_loss,
            },
            augment: AugmentConfig {
                enabled: self.augment,
                hflip_p: self.hflip_p,
                vflip_p: self.vflip_p,
                rotation_max: self.rotation_max,
            },
            threshold: self.threshold,
            seed: self.seed,
            checkpoint_dir: Some(self.output_dir.clone()),
        }
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("eval_batch = {}", self.eval_batch),
            format!("lr = {:e}", self.lr),
            format!("weight_decay = {}", self.weight_decay),
            format!("beta1 = {}", self.beta1),
            format!("beta2 = {}", self.beta2),
            format!("adam_eps = {:e}", self.adam_eps),
            format!("t_max = {}", self.t_max),
            format!("eta_min = {:e}", self.eta_min),
            format!("schedule = {}", self.schedule),
            format!("image_size = {}", self.image_size),
            format!("input_channels = {}", self.input_channels),
            format!("stage_channels = {}", fmt_list(&self.stage_channels)),
            format!("block_kind = {}", self.block_kind),
            format!("deep_supervision = {}", self.deep_supervision),
            format!("ucm_encoder = {}", fmt_list(&self.ucm_encoder)),
            format!("ucm_decoder = {}", fmt_list(&self.ucm_decoder)),
            format!("leaky_slope = {}", self.leaky_slope),
            format!("smooth = {}", self.smooth),
            format!("stage_weights = {}", fmt_list(&self.stage_weights)),
            format!("base_loss = {}", self.base_loss),
            format!("augment = {}", self.augment),
            format!("hflip_p = {}", self.hflip_p),
            format!("vflip_p = {}", self.vflip_p),
            format!("rotation_max = {}", self.rotation_max),
            format!("threshold = {}", self.threshold),
            format!("split_ratio = {}", self.split_ratio),
        ];
        if let Some(m) = &self.manifest {
            lines.push(format!("manifest = {}", m.display()));
        }
        lines.push(format!("output_dir = {}", self.output_dir.display()));
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_recipe() {
        let c = RunConfig::parse("", "empty").unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.t_max, 50);
        assert_eq!(c.eta_min, 1e-5);
        assert_eq!(c.epochs, 300);
        assert_eq!((c.batch_size, c.eval_batch), (8, 1));
        assert_eq!(c.image_size, 256);
        assert_eq!(c.stage_channels, [8, 16, 24, 32, 48, 64]);
        assert_eq!(c.stage_weights, [0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(c.base_loss, BaseLoss::BceSquaredDice);
        assert_eq!(c.block_kind, BlockKind::VariantCUcm);
    }

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse(
            "# run\nepochs = 3   # short\nstage_weights = 0.5, 0.4, 0.3, 0.2, 0.1\nblock_kind = variant_b_conv1x1\naugment = false\nmanifest = data/m.csv\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.stage_weights[0], 0.5);
        assert_eq!(c.block_kind, BlockKind::VariantBConv1x1);
        assert!(!c.augment);
        assert_eq!(c.manifest.as_deref(), Some(Path::new("data/m.csv")));
        assert_eq!(RunConfig::parse(&c.render(), "rendered").unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("learning_rate = 0.1", "unknown key"),
            ("epochs = 2\nepochs = 3", "twice"),
            ("epochs", "key = value"),
            ("epochs = many", "epochs"),
            ("stage_weights = 1, 2", "expected 5"),
            ("image_size = 100", "divisible"),
            ("epochs = 0", "epochs"),
            ("block_kind = variant_z", "unknown variant"),
        ] {
            let e = RunConfig::parse(text, "cfg").unwrap_err().to_string();
            assert!(e.contains(needle), "{text}: {e}");
        }
        let e = RunConfig::parse("x = 1", "cfg").unwrap_err();
        assert_eq!(e.origin, "cfg:1");
    }
}
