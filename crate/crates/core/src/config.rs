//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys are grouped
//! by prefix:
//!
//! ```text
//! # model (preset = default | compact, applied before the other keys)
//! model.preset = default
//! model.input_resolution = 128x128
//! model.downscale = 8
//! model.backbone_channels = 32,64,64
//! model.mask_channels = 32,64,64
//! model.blocks_per_stage = 2
//! model.key_dim = 16
//! model.query_dim = 32
//! model.value_dim = 32
//! model.decoder_channels = 64,32,16
//! # training
//! train.batch_size = 8
//! train.iterations = 1000
//! train.learning_rate = 1e-4
//! train.max_skip = 5
//! train.checkpoint_every = 100
//! train.seed = 0
//! train.tc_stop_gradient = false
//! train.debug_finite = false
//! loss.epsilon = 1e-8
//! loss.eta = 0.9
//! loss.alpha = 1.0
//! loss.beta = 0.1
//! # data generation
//! synth.resolution = 128x128
//! synth.video_length = 20
//! synth.num_videos = 200
//! synth.shape_kinds = ellipse,polygon
//! synth.radius_range = 0.1,0.22
//! synth.velocity_range = 0.5,3.0
//! synth.deformation = 0.15
//! synth.texture_seed = 0
//! synth.seed = 0
//! # inference
//! propagate.memory_stride = 5
//! propagate.threshold = 0.5
//! propagate.memory_capacity = none
//! ```
//!
//! Later assignments win, so command-line overrides are applied by parsing
//! them after the file.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::propagate::PropagationConfig;
use crate::synth::{ShapeKind, SynthConfig};
use crate::training::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Ordered key/value assignments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            out.set_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key = value, got {assignment:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("empty key in {assignment:?}")));
        }
        self.entries.insert(k.to_string(), v.to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn section(&self, prefix: &str) -> impl Iterator<Item = (&str, &str)> {
        let prefix = format!("{prefix}.");
        self.entries
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(&prefix).map(|k| (k, v.as_str())))
    }

    /// Errors on keys outside the known sections.
    pub fn check_sections(&self) -> Result<()> {
        const SECTIONS: [&str; 5] = ["model", "train", "loss", "synth", "propagate"];
        for k in self.keys() {
            let known = k
                .split_once('.')
                .is_some_and(|(s, _)| SECTIONS.contains(&s));
            if !known {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        Ok(())
    }

    pub fn apply_model(&self, cfg: &mut ModelConfig) -> Result<()> {
        if let Some(preset) = self.get("model.preset") {
            let res = cfg.encoder.input_resolution;
            *cfg = match preset {
                "default" => ModelConfig::default(),
                "compact" => ModelConfig::compact(res),
                other => return Err(Error::Config(format!("unknown model preset {other}"))),
            };
            cfg.encoder.input_resolution = res;
        }
        for (k, v) in self.section("model") {
            let e = &mut cfg.encoder;
            match k {
                "preset" => {}
                "input_resolution" => e.input_resolution = parse_resolution(k, v)?,
                "downscale" => e.downscale = parse(k, v)?,
                "backbone_channels" => e.backbone_channels = parse_list(k, v)?,
                "mask_channels" => e.mask_channels = parse_list(k, v)?,
                "blocks_per_stage" => e.blocks_per_stage = parse(k, v)?,
                "key_dim" => e.key_dim = parse(k, v)?,
                "query_dim" => e.query_dim = parse(k, v)?,
                "value_dim" => e.value_dim = parse(k, v)?,
                "decoder_channels" => cfg.decoder.stage_channels = parse_list(k, v)?,
                _ => return Err(unknown("model", k)),
            }
        }
        Ok(())
    }

    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (k, v) in self.section("train") {
            match k {
                "batch_size" => cfg.batch_size = parse(k, v)?,
                "iterations" => cfg.iterations = parse(k, v)?,
                "learning_rate" => cfg.learning_rate = parse(k, v)?,
                "max_skip" => cfg.max_skip = parse(k, v)?,
                "checkpoint_every" => cfg.checkpoint_every = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "tc_stop_gradient" => cfg.tc_stop_gradient = parse(k, v)?,
                "debug_finite" => cfg.debug_finite = parse(k, v)?,
                _ => return Err(unknown("train", k)),
            }
        }
        for (k, v) in self.section("loss") {
            let l = &mut cfg.loss;
            match k {
                "epsilon" => l.epsilon = parse(k, v)?,
                "eta" => l.eta = parse(k, v)?,
                "alpha" => l.alpha = parse(k, v)?,
                "beta" => l.beta = parse(k, v)?,
                _ => return Err(unknown("loss", k)),
            }
        }
        Ok(())
    }

    pub fn apply_synth(&self, cfg: &mut SynthConfig) -> Result<()> {
        for (k, v) in self.section("synth") {
            match k {
                "resolution" => cfg.resolution = parse_resolution(k, v)?,
                "video_length" => cfg.video_length = parse(k, v)?,
                "num_videos" => cfg.num_videos = parse(k, v)?,
                "shape_kinds" => {
                    cfg.shape_kinds = v
                        .split(',')
                        .map(|s| match s.trim() {
                            "ellipse" => Ok(ShapeKind::Ellipse),
                            "polygon" => Ok(ShapeKind::Polygon),
                            other => Err(Error::Config(format!("unknown shape kind {other}"))),
                        })
                        .collect::<Result<_>>()?
                }
                "radius_range" => cfg.radius_range = parse_pair(k, v)?,
                "velocity_range" => cfg.velocity_range = parse_pair(k, v)?,
                "deformation" => cfg.deformation = parse(k, v)?,
                "texture_seed" => cfg.texture_seed = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                _ => return Err(unknown("synth", k)),
            }
        }
        Ok(())
    }

    pub fn apply_propagation(&self, cfg: &mut PropagationConfig) -> Result<()> {
        for (k, v) in self.section("propagate") {
            match k {
                "memory_stride" => cfg.memory_stride = parse(k, v)?,
                "threshold" => cfg.binarize_threshold = parse(k, v)?,
                "memory_capacity" => {
                    cfg.memory_capacity = match v {
                        "none" | "" => None,
                        _ => Some(parse(k, v)?),
                    }
                }
                "start_frame" => cfg.start_frame = parse(k, v)?,
                _ => return Err(unknown("propagate", k)),
            }
        }
        Ok(())
    }
}

fn unknown(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key {section}.{key}"))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key} needs two values, got {v:?}"))),
    }
}

/// `WxH` (or a single number for square), returned as `(height, width)`.
fn parse_resolution(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((w, h)) => Ok((parse(key, h.trim())?, parse(key, w.trim())?)),
        None => {
            let s = parse(key, v)?;
            Ok((s, s))
        }
    }
}
