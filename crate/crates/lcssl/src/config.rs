//! Flat `key = value` run configuration.
//!
//! Precedence: built-in defaults, then a config file, then repeated
//! `--set key=value` overrides. Unknown keys are rejected so typos fail
//! loudly, and the fully resolved config can be dumped verbatim.

use crate::error::{Error, Result};
use crate::losses::LocalVariant;
use crate::model::NormMode;
use crate::trainer::TrainConfig;
use std::path::Path;

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!(
        "bad value {value:?} for key {key:?}"
    )))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse::<usize>(key, p))
        .collect()
}

/// Apply one key/value setting to a config.
pub fn apply_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        // trainer
        "steps" => cfg.steps = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "base_lr" => cfg.base_lr = parse(key, value)?,
        "momentum" => cfg.momentum = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "warmup_frac" => cfg.warmup_frac = parse(key, value)?,
        "ema_base" => cfg.ema_base = parse(key, value)?,
        "lars" => cfg.lars = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        // loss
        "alpha" => cfg.loss.alpha = parse(key, value)?,
        "tau" => cfg.loss.tau = parse(key, value)?,
        "symmetric_global" => cfg.loss.symmetric_global = parse(key, value)?,
        "variant" => {
            cfg.loss.variant = match value.trim() {
                "nll_warp" => LocalVariant::NllWarp,
                "feature_warp" => LocalVariant::FeatureWarp,
                "local_mse" => LocalVariant::LocalMse,
                other => {
                    return Err(Error::Config(format!(
                        "unknown variant {other:?} (nll_warp | feature_warp | local_mse)"
                    )))
                }
            }
        }
        // model; image_size also fixes the augmentation output size
        "image_size" => {
            let s: usize = parse(key, value)?;
            cfg.model.image_size = (s, s);
            cfg.aug.out_size = (s, s);
        }
        "stage_channels" => cfg.model.stage_channels = parse_list(key, value)?,
        "stage_downsample" => cfg.model.stage_downsample = parse_list(key, value)?,
        "proj_hidden" => cfg.model.proj_hidden = parse(key, value)?,
        "proj_dim" => cfg.model.proj_dim = parse(key, value)?,
        "pred_hidden" => cfg.model.pred_hidden = parse(key, value)?,
        "local_hidden" => cfg.model.local_hidden = parse(key, value)?,
        "local_dim" => cfg.model.local_dim = parse(key, value)?,
        "norm_mode" => {
            cfg.model.norm_mode = match value.trim() {
                "batch" => NormMode::Batch,
                "running" => NormMode::Running,
                "off" => NormMode::Off,
                other => {
                    return Err(Error::Config(format!(
                        "unknown norm_mode {other:?} (batch | running | off)"
                    )))
                }
            }
        }
        // augmentation
        "src_size" => {
            let s: usize = parse(key, value)?;
            cfg.aug.src_size = (s, s);
        }
        "scale_min" => cfg.aug.scale_range.0 = parse(key, value)?,
        "scale_max" => cfg.aug.scale_range.1 = parse(key, value)?,
        "aspect_min" => cfg.aug.aspect_range.0 = parse(key, value)?,
        "aspect_max" => cfg.aug.aspect_range.1 = parse(key, value)?,
        "flip_p" => cfg.aug.flip_p = parse(key, value)?,
        "jitter_p" => cfg.aug.jitter_p = parse(key, value)?,
        "grayscale_p" => cfg.aug.grayscale_p = parse(key, value)?,
        "blur_p_color" => cfg.aug.blur_p.0 = parse(key, value)?,
        "blur_p_spatial" => cfg.aug.blur_p.1 = parse(key, value)?,
        "blur_sigma_min" => cfg.aug.blur_sigma_range.0 = parse(key, value)?,
        "blur_sigma_max" => cfg.aug.blur_sigma_range.1 = parse(key, value)?,
        "solarize_p_color" => cfg.aug.solarize_p.0 = parse(key, value)?,
        "solarize_p_spatial" => cfg.aug.solarize_p.1 = parse(key, value)?,
        other => return Err(Error::Config(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Parse a config file's `key = value` lines into `cfg`. `#` starts a
/// comment; blank lines are ignored.
pub fn apply_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        msg: e.to_string(),
    })?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            msg: format!("line {}: expected key = value, got {raw:?}", lineno + 1),
        })?;
        apply_kv(cfg, k.trim(), v).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            msg: format!("line {}: {e}", lineno + 1),
        })?;
    }
    Ok(())
}

/// Resolve a config from defaults, an optional file, and `--set` overrides.
pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        apply_file(&mut cfg, path)?;
    }
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got {s:?}"))
        })?;
        apply_kv(&mut cfg, k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// The fully resolved config in the same `key = value` syntax the parser
/// accepts; round-trips through [`apply_file`].
pub fn dump(cfg: &TrainConfig) -> String {
    let variant = match cfg.loss.variant {
        LocalVariant::NllWarp => "nll_warp",
        LocalVariant::FeatureWarp => "feature_warp",
        LocalVariant::LocalMse => "local_mse",
    };
    let norm = match cfg.model.norm_mode {
        NormMode::Batch => "batch",
        NormMode::Running => "running",
        NormMode::Off => "off",
    };
    format!(
        "steps = {}\nbatch_size = {}\nbase_lr = {}\nmomentum = {}\nweight_decay = {}\n\
         warmup_frac = {}\nema_base = {}\nlars = {}\nseed = {}\n\
         alpha = {}\ntau = {}\nvariant = {}\nsymmetric_global = {}\n\
         image_size = {}\nstage_channels = {}\nstage_downsample = {}\n\
         proj_hidden = {}\nproj_dim = {}\npred_hidden = {}\nlocal_hidden = {}\nlocal_dim = {}\n\
         norm_mode = {}\nsrc_size = {}\nscale_min = {}\nscale_max = {}\n\
         aspect_min = {}\naspect_max = {}\nflip_p = {}\njitter_p = {}\ngrayscale_p = {}\n\
         blur_p_color = {}\nblur_p_spatial = {}\nblur_sigma_min = {}\nblur_sigma_max = {}\n\
         solarize_p_color = {}\nsolarize_p_spatial = {}\n",
        cfg.steps,
        cfg.batch_size,
        cfg.base_lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.warmup_frac,
        cfg.ema_base,
        cfg.lars,
        cfg.seed,
        cfg.loss.alpha,
        cfg.loss.tau,
        variant,
        cfg.loss.symmetric_global,
        cfg.model.image_size.0,
        list(&cfg.model.stage_channels),
        list(&cfg.model.stage_downsample),
        cfg.model.proj_hidden,
        cfg.model.proj_dim,
        cfg.model.pred_hidden,
        cfg.model.local_hidden,
        cfg.model.local_dim,
        norm,
        cfg.aug.src_size.0,
        cfg.aug.scale_range.0,
        cfg.aug.scale_range.1,
        cfg.aug.aspect_range.0,
        cfg.aug.aspect_range.1,
        cfg.aug.flip_p,
        cfg.aug.jitter_p,
        cfg.aug.grayscale_p,
        cfg.aug.blur_p.0,
        cfg.aug.blur_p.1,
        cfg.aug.blur_sigma_range.0,
        cfg.aug.blur_sigma_range.1,
        cfg.aug.solarize_p.0,
        cfg.aug.solarize_p.1,
    )
}
