//! One-shot inference: the annotated frame enters memory with its mask, every
//! later frame is segmented from memory, and every `memory_stride`-th frame
//! (counted from the annotated one) is written back with its predicted soft
//! mask.

use crate::encoders::Provenance;
use crate::error::{Error, Result};
use crate::io::{self, Frame, Mask};
use crate::memory::{MemoryBank, TapeMemory};
use crate::model::Model;
use crate::params::Forward;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub memory_stride: usize,
    /// Foreground when the probability exceeds this value.
    pub binarize_threshold: f64,
    pub memory_capacity: Option<usize>,
    /// Index of the annotated frame.
    pub start_frame: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            memory_stride: 5,
            binarize_threshold: 0.5,
            memory_capacity: None,
            start_frame: 0,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_stride == 0 {
            return Err(Error::Config("memory_stride must be >= 1".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.binarize_threshold
            )));
        }
        Ok(())
    }

    /// Whether a predicted frame is written to memory.
    pub fn is_memory_frame(&self, index: usize) -> bool {
        index >= self.start_frame && (index - self.start_frame) % self.memory_stride == 0
    }
}

/// Output for one segmented frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    /// Row-major foreground probabilities.
    pub probability: Vec<f64>,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct PropagationResult {
    /// `None` for frames before the start frame.
    pub frames: Vec<Option<FrameResult>>,
    /// Frames written to memory, in write order.
    pub memory_frames: Vec<usize>,
    /// Wall-clock milliseconds spent on each frame.
    pub timing_ms: Vec<f64>,
    pub memory: MemoryBank,
    pub config: PropagationConfig,
}

impl PropagationResult {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn mask(&self, index: usize) -> Option<&Mask> {
        self.frames.get(index)?.as_ref().map(|f| &f.mask)
    }

    /// Masks of the segmented frames with their indices.
    pub fn masks(&self) -> impl Iterator<Item = (usize, &Mask)> {
        self.frames
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|f| (i, &f.mask)))
    }

    /// Writes `masks/` (8-bit) and optionally `probs/` (16-bit) PNGs under
    /// `out_dir`, one file per segmented frame named by `names[index]`.
    pub fn write(&self, out_dir: &Path, names: &[String], probabilities: bool) -> Result<()> {
        if names.len() != self.frames.len() {
            return Err(Error::Input(format!(
                "{} names for {} frames",
                names.len(),
                self.frames.len()
            )));
        }
        let masks = out_dir.join("masks");
        let probs = out_dir.join("probs");
        std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        if probabilities {
            std::fs::create_dir_all(&probs).map_err(|e| Error::io(&probs, e))?;
        }
        for (i, f) in self.frames.iter().enumerate() {
            let Some(f) = f else { continue };
            io::write_mask(&masks.join(&names[i]), &f.mask)?;
            if probabilities {
                io::write_probability(&probs.join(&names[i]), f.mask.width, f.mask.height, &f.probability)?;
            }
        }
        Ok(())
    }
}

fn check_frame(model: &Model, index: usize, frame: &Frame) -> Result<()> {
    let (h, w) = model.resolution();
    if frame.resolution() != (h, w) {
        return Err(Error::Input(format!(
            "frame {index} is {}x{}, the model expects {w}x{h}",
            frame.width, frame.height
        )));
    }
    Ok(())
}

/// Key `[Dk, hw]` and value `[Dv, hw]` of a frame under a given mask.
fn encode_memory(model: &Model, frame: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let mut cx = Forward::new(&mut tape, model.params(), false);
    let f = cx.tape.constant(frame.clone());
    let feats = model.encode_query_on(&mut cx, f)?;
    let m = cx.tape.constant(mask.clone());
    let v = model.encode_mask_on(&mut cx, m, feats.backbone)?;
    Ok((tape.value(feats.key).clone(), tape.value(v).clone()))
}

struct Prediction {
    probability: Vec<f64>,
    memory: Option<(Tensor, Tensor)>,
}

/// Segments one frame from the bank; when `write` is set also encodes the
/// soft prediction into a key/value pair.
fn predict(model: &Model, bank: &MemoryBank, frame: &Tensor, write: bool) -> Result<Prediction> {
    let mut tape = Tape::new();
    let memory = TapeMemory::load(&mut tape, bank);
    let mut cx = Forward::new(&mut tape, model.params(), false);
    let f = cx.tape.constant(frame.clone());
    let step = model.segment_on(&mut cx, &memory, f)?;
    let memory = if write {
        let v = model.encode_mask_on(&mut cx, step.foreground, step.features.backbone)?;
        Some((tape.value(step.features.key).clone(), tape.value(v).clone()))
    } else {
        None
    };
    Ok(Prediction {
        probability: tape.value(step.foreground).data().to_vec(),
        memory,
    })
}

fn annotated(mask: &Mask) -> FrameResult {
    FrameResult {
        probability: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        mask: mask.clone(),
    }
}

/// Segments every frame from `config.start_frame` onwards given the mask of
/// the start frame. `progress(done, total)` is called after each frame.
pub fn propagate(
    model: &Model,
    frames: &[Frame],
    first_mask: &Mask,
    config: &PropagationConfig,
    progress: impl FnMut(usize, usize),
) -> Result<PropagationResult> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::Input("no frames to propagate".into()));
    }
    let bank = MemoryBank::new(config.memory_capacity)?;
    let empty = PropagationResult {
        frames: vec![None; frames.len()],
        memory_frames: Vec::new(),
        timing_ms: vec![0.0; frames.len()],
        memory: bank,
        config: *config,
    };
    resume(model, frames, empty, first_mask, config.start_frame, progress)
}

/// Replaces the mask of frame `index` by `corrected`, drops memory written
/// at or after it, and re-segments all later frames. Earlier frames are
/// left untouched.
pub fn repropagate_from(
    model: &Model,
    frames: &[Frame],
    result: &PropagationResult,
    corrected: &Mask,
    index: usize,
    progress: impl FnMut(usize, usize),
) -> Result<PropagationResult> {
    let config = result.config;
    if index < config.start_frame {
        return Err(Error::Input(format!(
            "correction at frame {index} precedes the annotated frame {}",
            config.start_frame
        )));
    }
    if frames.len() != result.frames.len() {
        return Err(Error::Input(format!(
            "{} frames given for a result over {}",
            frames.len(),
            result.frames.len()
        )));
    }
    let mut base = result.clone();
    base.memory.truncate_from(index);
    base.memory_frames.retain(|&f| f < index);
    resume(model, frames, base, corrected, index, progress)
}

fn resume(
    model: &Model,
    frames: &[Frame],
    mut result: PropagationResult,
    mask: &Mask,
    index: usize,
    mut progress: impl FnMut(usize, usize),
) -> Result<PropagationResult> {
    let total = frames.len();
    if index >= total {
        return Err(Error::Input(format!(
            "frame {index} is outside a video of {total} frames"
        )));
    }
    check_frame(model, index, &frames[index])?;
    if mask.resolution() != frames[index].resolution() {
        return Err(Error::Input(format!(
            "mask for frame {index} is {}x{}, the frame is {}x{}",
            mask.width, mask.height, frames[index].width, frames[index].height
        )));
    }
    let config = result.config;
    let started = Instant::now();
    let (key, value) = encode_memory(model, &frames[index].to_tensor(), &mask.to_tensor())?;
    result.memory.write(index, &key, &value, Provenance::GroundTruth)?;
    result.memory_frames.push(index);
    result.frames[index] = Some(annotated(mask));
    result.timing_ms[index] = started.elapsed().as_secs_f64() * 1e3;
    progress(index + 1, total);

    let (h, w) = model.resolution();
    for t in index + 1..total {
        let started = Instant::now();
        check_frame(model, t, &frames[t])?;
        let write = config.is_memory_frame(t);
        let pred = predict(model, &result.memory, &frames[t].to_tensor(), write)?;
        if let Some((key, value)) = pred.memory {
            result.memory.write(t, &key, &value, Provenance::Predicted)?;
            result.memory_frames.push(t);
        }
        let mask = Mask::from_probabilities(w, h, &pred.probability, config.binarize_threshold)?;
        result.frames[t] = Some(FrameResult {
            probability: pred.probability,
            mask,
        });
        result.timing_ms[t] = started.elapsed().as_secs_f64() * 1e3;
        progress(t + 1, total);
    }
    Ok(result)
}

/// Mean scores of first-frame propagation over a set of videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub per_video: Vec<crate::metrics::MeanScores>,
    pub mean: crate::metrics::MeanScores,
}

/// Propagates the first ground-truth mask of every video and averages the
/// per-video mean scores.
pub fn evaluate_dataset(
    model: &Model,
    dataset: &crate::dataset::Dataset,
    config: &PropagationConfig,
    metrics: &crate::metrics::MetricsConfig,
) -> Result<DatasetScores> {
    let mut per_video = Vec::with_capacity(dataset.len());
    for (i, video) in dataset.videos.iter().enumerate() {
        let result = propagate(model, &video.frames, &video.masks[config.start_frame], config, |_, _| {})?;
        let preds: Vec<Mask> = result
            .frames
            .iter()
            .zip(&video.masks)
            .map(|(f, gt)| f.as_ref().map_or_else(|| gt.clone(), |f| f.mask.clone()))
            .collect();
        let report = crate::metrics::score_sequence(&preds[config.start_frame..], &video.masks[config.start_frame..], metrics)?;
        let mean = report
            .mean
            .ok_or_else(|| Error::Input(format!("video {i} has no frame to score")))?;
        per_video.push(mean);
    }
    if per_video.is_empty() {
        return Err(Error::Input("no videos to evaluate".into()));
    }
    let n = per_video.len() as f64;
    let mean = crate::metrics::MeanScores {
        j: per_video.iter().map(|m| m.j).sum::<f64>() / n,
        f: per_video.iter().map(|m| m.f).sum::<f64>() / n,
        dice: per_video.iter().map(|m| m.dice).sum::<f64>() / n,
    };
    Ok(DatasetScores { per_video, mean })
}
