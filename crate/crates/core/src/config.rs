//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        line,
        reason: format!("cannot parse {raw:?} for {key}"),
    })
}

fn optional<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Option<T>> {
    if raw == "none" {
        Ok(None)
    } else {
        value(line, key, raw).map(Some)
    }
}

fn list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>> {
    if raw.is_empty() || raw == "none" {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(line, key, p.trim())).collect()
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

fn show_list<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (k, raw_line) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, raw)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    reason: format!("expected `key = value`, got {content:?}"),
                });
            };
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    reason: format!("duplicate key {key}"),
                });
            }
            cfg.set(line, key, raw)?;
        }
        cfg.model.validate().map_err(|e| Error::Config {
            line: 0,
            reason: e.to_string(),
        })?;
        cfg.train.validate().map_err(|e| Error::Config {
            line: 0,
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, raw: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "width" => m.width = value(line, key, raw)?,
            "heads" => m.heads = value(line, key, raw)?,
            "rotary_dim" => m.rotary_dim = value(line, key, raw)?,
            "rope_base" => m.rope_base = value(line, key, raw)?,
            "rope_scale" => m.rope_scale = optional(line, key, raw)?,
            "lattice_res" => m.lattice_res = value(line, key, raw)?,
            "spatial_width" => m.spatial_width = value(line, key, raw)?,
            "topology_width" => m.topology_width = value(line, key, raw)?,
            "boundary_width" => m.boundary_width = value(line, key, raw)?,
            "self_width" => m.self_width = value(line, key, raw)?,
            "spatial_radius" => m.spatial_radius = value(line, key, raw)?,
            "boundary_radius" => m.boundary_radius = optional(line, key, raw)?,
            "encoder_layers" => m.encoder_layers = value(line, key, raw)?,
            "decoder_layers" => m.decoder_layers = value(line, key, raw)?,
            "ffn_hidden" => m.ffn_hidden = value(line, key, raw)?,
            "merge_hidden" => m.merge_hidden = value(line, key, raw)?,
            "head_hidden" => m.head_hidden = list(line, key, raw)?,
            "particle_channels" => m.particle_channels = value(line, key, raw)?,
            "boundary_channels" => m.boundary_channels = value(line, key, raw)?,
            "attribute_center" => m.attribute_center = list(line, key, raw)?,
            "attribute_scale" => m.attribute_scale = list(line, key, raw)?,
            "init_seed" => self.init_seed = value(line, key, raw)?,
            "window" => t.window = value(line, key, raw)?,
            "lr" => t.lr = value(line, key, raw)?,
            "warmup_steps" => t.warmup_steps = value(line, key, raw)?,
            "total_steps" => t.total_steps = value(line, key, raw)?,
            "min_lr" => t.min_lr = value(line, key, raw)?,
            "weight_decay" => t.weight_decay = value(line, key, raw)?,
            "beta1" => t.beta1 = value(line, key, raw)?,
            "beta2" => t.beta2 = value(line, key, raw)?,
            "eps" => t.eps = value(line, key, raw)?,
            "clip_norm" => t.clip_norm = value(line, key, raw)?,
            "seed" => t.seed = value(line, key, raw)?,
            "epochs" => t.epochs = value(line, key, raw)?,
            "loss_position" => t.weights.position = value(line, key, raw)?,
            "loss_velocity" => t.weights.velocity = value(line, key, raw)?,
            "lambda_phys" => t.weights.physics = value(line, key, raw)?,
            "sph_h" => t.sph_h = optional(line, key, raw)?,
            "val_horizon" => t.val_horizon = optional(line, key, raw)?,
            other => {
                return Err(Error::Config {
                    line,
                    reason: format!("unknown key {other}"),
                })
            }
        }
        Ok(())
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn dump(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let pairs: Vec<(&str, String)> = vec![
            ("width", m.width.to_string()),
            ("heads", m.heads.to_string()),
            ("rotary_dim", m.rotary_dim.to_string()),
            ("rope_base", m.rope_base.to_string()),
            ("rope_scale", show(&m.rope_scale)),
            ("lattice_res", m.lattice_res.to_string()),
            ("spatial_width", m.spatial_width.to_string()),
            ("topology_width", m.topology_width.to_string()),
            ("boundary_width", m.boundary_width.to_string()),
            ("self_width", m.self_width.to_string()),
            ("spatial_radius", m.spatial_radius.to_string()),
            ("boundary_radius", show(&m.boundary_radius)),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("ffn_hidden", m.ffn_hidden.to_string()),
            ("merge_hidden", m.merge_hidden.to_string()),
            ("head_hidden", show_list(&m.head_hidden)),
            ("particle_channels", m.particle_channels.to_string()),
            ("boundary_channels", m.boundary_channels.to_string()),
            ("attribute_center", show_list(&m.attribute_center)),
            ("attribute_scale", show_list(&m.attribute_scale)),
            ("init_seed", self.init_seed.to_string()),
            ("window", t.window.to_string()),
            ("lr", t.lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("total_steps", t.total_steps.to_string()),
            ("min_lr", t.min_lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("seed", t.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("loss_position", t.weights.position.to_string()),
            ("loss_velocity", t.weights.velocity.to_string()),
            ("lambda_phys", t.weights.physics.to_string()),
            ("sph_h", show(&t.sph_h)),
            ("val_horizon", show(&t.val_horizon)),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
