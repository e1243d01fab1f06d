//! `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::head::FusionKind;
use crate::metrics::{default_density_sigma, MetricOptions};
use crate::model::{default_fuse_channels, ModelConfig};
use crate::params::InitScheme;
use crate::train::TrainConfig;

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("base_size", "224", "input side: 64, 112 or 224"),
    ("width_factor", "1", "backbone width multiplier in (0, 1]"),
    ("init", "0.01", "conv init: a truncated-normal std, or `fan_in`"),
    ("pretrained", "", "optional backbone checkpoint (width_factor 1 only)"),
    ("contrast.sigmas", "5,10,20,40,80", "pyramid sigmas at a 224 input, scaled with base_size"),
    ("fuse_channels", "max(8, round(32*width_factor))", "width of every fused representation"),
    ("mode", "full", "NCF, CF, SF, DCF, DenCF, DenCF+CBP or full"),
    ("fusion", "network", "`network` (stacked blocks) or `sum`"),
    ("kl_eps", "1e-8", "guard inside the KL logarithm"),
    ("learning_rate", "1e-4", "RMSProp step size"),
    ("momentum", "0.9", "momentum on the scaled step"),
    ("weight_decay", "0.0005", "α, squared-weight penalty per branch"),
    ("batch_size", "10", "minibatch size"),
    ("max_epochs", "100", "epoch limit"),
    ("max_steps", "0", "step limit, 0 for none"),
    ("rms_decay", "0.9", "RMSProp ρ"),
    ("rms_eps", "1e-8", "RMSProp ε"),
    ("patience", "2", "consecutive validation increases before stopping"),
    ("seed", "0", "seed for init, shuffling and metric sampling"),
    ("val_fraction", "0.2", "share of the manifest held out for validation"),
    ("density_sigma", "8*base_size/224", "groundtruth blur in map pixels"),
    ("auc_splits", "100", "random splits for AUC-Borji and shuffled AUC"),
    ("emd_grid", "32", "EMD downsampling grid (at most 32)"),
    ("emd", "true", "compute EMD in evaluation reports"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricOptions,
    pub density_sigma: Option<f64>,
    pub val_fraction: f64,
    pub pretrained: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricOptions::default(),
            density_sigma: None,
            val_fraction: 0.2,
            pretrained: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

impl RunConfig {
    pub fn density_sigma(&self) -> f64 {
        self.density_sigma.unwrap_or_else(|| default_density_sigma(self.model.backbone.base_size))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut fuse_set = false;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: k + 1, msg };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "fuse_channels" {
                fuse_set = true;
            }
            cfg.set(key, value).map_err(err)?;
        }
        if !fuse_set {
            cfg.model.fuse_channels = default_fuse_channels(cfg.model.backbone.width_factor);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "base_size" => m.backbone.base_size = num(key, v)?,
            "width_factor" => m.backbone.width_factor = num(key, v)?,
            "init" => m.backbone.init = if v == "fan_in" { InitScheme::FanIn } else { InitScheme::Fixed(num(key, v)?) },
            "pretrained" => self.pretrained = (!v.is_empty()).then(|| PathBuf::from(v)),
            "contrast.sigmas" => {
                m.pyramid_sigmas = v.split(',').map(|s| num(key, s.trim())).collect::<std::result::Result<_, _>>()?
            }
            "fuse_channels" => m.fuse_channels = num(key, v)?,
            "mode" => m.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "fusion" => {
                m.fusion = match v {
                    "network" => FusionKind::Network,
                    "sum" => FusionKind::Sum,
                    _ => return Err(format!("`fusion`: expected `network` or `sum`, got `{v}`")),
                }
            }
            "kl_eps" => m.kl_eps = num(key, v)?,
            "learning_rate" => t.learning_rate = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "max_epochs" => t.max_epochs = num(key, v)?,
            "max_steps" => t.max_steps = Some(num::<usize>(key, v)?).filter(|&s| s > 0),
            "rms_decay" => t.rms_decay = num(key, v)?,
            "rms_eps" => t.rms_eps = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "seed" => {
                t.seed = num(key, v)?;
                self.metrics.seed = t.seed;
            }
            "val_fraction" => self.val_fraction = num(key, v)?,
            "density_sigma" => self.density_sigma = Some(num(key, v)?),
            "auc_splits" => self.metrics.splits = num(key, v)?,
            "emd_grid" => self.metrics.emd_grid = num(key, v)?,
            "emd" => self.metrics.with_emd = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.density_sigma.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::Config("density_sigma must be >= 0".into()));
        }
        if self.metrics.splits == 0 {
            return Err(Error::Config("auc_splits must be >= 1".into()));
        }
        if !(1..=32).contains(&self.metrics.emd_grid) {
            return Err(Error::Config("emd_grid must be in 1..=32".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("base_size", m.backbone.base_size.to_string());
        put("width_factor", m.backbone.width_factor.to_string());
        put(
            "init",
            match m.backbone.init {
                InitScheme::FanIn => "fan_in".into(),
                InitScheme::Fixed(s) => s.to_string(),
            },
        );
        put("pretrained", self.pretrained.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("contrast.sigmas", m.pyramid_sigmas.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        put("fuse_channels", m.fuse_channels.to_string());
        put("mode", m.mode.name().into());
        put(
            "fusion",
            match m.fusion {
                FusionKind::Network => "network".into(),
                FusionKind::Sum => "sum".into(),
            },
        );
        put("kl_eps", m.kl_eps.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("batch_size", t.batch_size.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("max_steps", t.max_steps.unwrap_or(0).to_string());
        put("rms_decay", t.rms_decay.to_string());
        put("rms_eps", t.rms_eps.to_string());
        put("patience", t.patience.to_string());
        put("seed", t.seed.to_string());
        put("val_fraction", self.val_fraction.to_string());
        if let Some(s) = self.density_sigma {
            put("density_sigma", s.to_string());
        }
        put("auc_splits", self.metrics.splits.to_string());
        put("emd_grid", self.metrics.emd_grid.to_string());
        put("emd", self.metrics.with_emd.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AblationMode;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let mut cfg = RunConfig::default();
        for (k, default, _) in KEYS {
            let v = match *k {
                "fuse_channels" => "8",
                "density_sigma" => "2.5",
                "pretrained" => "",
                _ => default,
            };
            cfg.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n", Path::new("run.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, ref msg, .. } if msg.contains("bogus")), "{err}");
    }

    #[test]
    fn fuse_channels_follow_width_unless_set() {
        let c = RunConfig::parse("width_factor = 0.125\nbase_size = 64", Path::new("x")).unwrap();
        assert_eq!(c.model.fuse_channels, 8);
        let c = RunConfig::parse("width_factor = 0.5\nfuse_channels = 12", Path::new("x")).unwrap();
        assert_eq!(c.model.fuse_channels, 12);
        let c = RunConfig::parse("mode = SF\ninit = fan_in\nmax_steps = 30", Path::new("x")).unwrap();
        assert_eq!(c.model.mode, AblationMode::Sf);
        assert_eq!(c.model.backbone.init, InitScheme::FanIn);
        assert_eq!(c.train.max_steps, Some(30));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in
            ["base_size = 100", "width_factor = 2", "batch_size = 0", "momentum = 1", "mode = huge", "fusion = avg"]
        {
            assert!(RunConfig::parse(text, Path::new("x")).is_err(), "{text}");
        }
    }
}
