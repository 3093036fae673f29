//! Desk-scale trainer: 3-frame clip sampling, the full propagate-and-encode
//! forward pass with both losses, Adam updates, checkpoints and CSV logs.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::memory::TapeMemory;
use crate::model::{Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::Forward;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Frames skipped between consecutive clip frames are drawn from `0..=max_skip`.
    pub max_skip: usize,
    pub loss: LossConfig,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Block contrastive-loss gradients from reaching the query encoder.
    pub tc_stop_gradient: bool,
    /// Abort on NaN/Inf in any forward value.
    pub debug_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 1000,
            learning_rate: 1e-4,
            max_skip: 5,
            loss: LossConfig::default(),
            checkpoint_every: 0,
            seed: 0,
            tc_stop_gradient: false,
            debug_finite: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Three temporally ordered frames of one video with their masks.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub video: usize,
    pub indices: [usize; 3],
    /// `[1,3,H,W]` each.
    pub frames: [Tensor; 3],
    /// `[1,1,H,W]` binary each.
    pub masks: [Tensor; 3],
}

/// Draws strictly increasing frame indices `i < j < k` whose gaps are
/// uniform over `1..=max_skip+1`, conditioned on fitting in the video, with
/// the start uniform over the admissible range.
pub fn sample_clip_indices(
    video_len: usize,
    max_skip: usize,
    rng: &mut impl Rng,
) -> Result<[usize; 3]> {
    if video_len < 3 {
        return Err(Error::Input(format!(
            "video of {video_len} frames is too short for a 3-frame clip"
        )));
    }
    loop {
        let g1 = rng.gen_range(1..=max_skip + 1);
        let g2 = rng.gen_range(1..=max_skip + 1);
        if g1 + g2 < video_len {
            let start = rng.gen_range(0..video_len - g1 - g2);
            return Ok([start, start + g1, start + g1 + g2]);
        }
    }
}

pub fn sample_clip(
    dataset: &Dataset,
    video: usize,
    max_skip: usize,
    rng: &mut impl Rng,
) -> Result<ClipSample> {
    let v = dataset
        .videos
        .get(video)
        .ok_or_else(|| Error::Input(format!("no video {video}")))?;
    let indices = sample_clip_indices(v.len(), max_skip, rng)?;
    Ok(ClipSample {
        video,
        indices,
        frames: indices.map(|i| v.frames[i].to_tensor()),
        masks: indices.map(|i| v.masks[i].to_tensor()),
    })
}

/// Loss values of one clip or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub bce: f64,
    pub tc: f64,
    pub total: f64,
}

/// Handles of the clip losses on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ClipLossVars {
    pub bce: Var,
    pub tc: Var,
    pub total: Var,
}

/// Records the training forward pass of one clip:
///
/// 1. frame 1 and its ground-truth mask enter memory;
/// 2. frame 2 is segmented from memory and its soft prediction encoded into memory;
/// 3. frame 3 is segmented from frames 1-2 and its prediction encoded;
///
/// followed by the cross entropy over frames 2-3 and the contrastive loss over
/// the three stored values.
pub fn clip_forward(
    model: &Model,
    cx: &mut Forward,
    clip: &ClipSample,
    loss: &LossConfig,
    tc_stop_gradient: bool,
) -> Result<ClipLossVars> {
    let e = &model.config().encoder;
    let mut memory = TapeMemory::new();

    let f0 = cx.tape.constant(clip.frames[0].clone());
    let feats0 = model.encode_query_on(cx, f0)?;
    let m0 = cx.tape.constant(clip.masks[0].clone());
    let v0 = model.encode_mask_on(cx, m0, feats0.backbone)?;
    memory.push(cx.tape, feats0.key, v0)?;

    let f1 = cx.tape.constant(clip.frames[1].clone());
    let step1 = model.segment_on(cx, &memory, f1)?;
    let v1 = model.encode_mask_on(cx, step1.foreground, step1.features.backbone)?;
    memory.push(cx.tape, step1.features.key, v1)?;

    let f2 = cx.tape.constant(clip.frames[2].clone());
    let step2 = model.segment_on(cx, &memory, f2)?;
    let v2 = model.encode_mask_on(cx, step2.foreground, step2.features.backbone)?;

    let probs = cx.tape.concat(&[step1.probs, step2.probs], 0)?;
    let (h, w) = e.input_resolution;
    let mut gt = clip.masks[1].data().to_vec();
    gt.extend_from_slice(clip.masks[2].data());
    let gt = Tensor::new(vec![2, 1, h, w], gt)?;
    let bce = losses::bootstrapped_ce(cx.tape, probs, &gt, loss.eta)?;

    let values = if tc_stop_gradient {
        // Same values, but the backbone features they see are detached.
        let b0 = cx.tape.detach(feats0.backbone);
        let b1 = cx.tape.detach(step1.features.backbone);
        let b2 = cx.tape.detach(step2.features.backbone);
        [
            model.encode_mask_on(cx, m0, b0)?,
            model.encode_mask_on(cx, step1.foreground, b1)?,
            model.encode_mask_on(cx, step2.foreground, b2)?,
        ]
    } else {
        [v0, v1, v2]
    };
    let pooled = values
        .iter()
        .map(|&v| {
            let p = cx.tape.avg_pool_spatial(v)?;
            cx.tape.reshape(p, vec![e.value_dim])
        })
        .collect::<Result<Vec<_>>>()?;
    let tc = losses::temporal_contrastive_loss(cx.tape, &pooled, loss.epsilon)?;
    let total = losses::total_loss(cx.tape, bce, tc, loss.alpha, loss.beta)?;
    Ok(ClipLossVars { bce, tc, total })
}

/// Runs forward and backward for every clip, accumulating parameter
/// gradients (averaged over the batch) without stepping the optimizer.
pub fn accumulate_batch_grads(
    model: &mut Model,
    batch: &[ClipSample],
    config: &TrainConfig,
) -> Result<LossValues> {
    let mut sum = LossValues::default();
    let scale = 1.0 / batch.len() as f64;
    for clip in batch {
        let mut tape = Tape::new().with_finite_checks(config.debug_finite);
        let (vars, binding) = {
            let mut cx = Forward::new(&mut tape, model.params(), true);
            let vars = clip_forward(model, &mut cx, clip, &config.loss, config.tc_stop_gradient)?;
            (vars, cx.into_binding())
        };
        let values = LossValues {
            bce: tape.value(vars.bce).item()?,
            tc: tape.value(vars.tc).item()?,
            total: tape.value(vars.total).item()?,
        };
        if !values.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss on clip from video {} frames {:?}",
                clip.video, clip.indices
            )));
        }
        let scaled = tape.scale(vars.total, scale)?;
        tape.backward(scaled)?;
        model.params_mut().accumulate_grads(&tape, &binding)?;
        sum.bce += values.bce * scale;
        sum.tc += values.tc * scale;
        sum.total += values.total * scale;
    }
    Ok(sum)
}

/// One optimisation step on a batch of clips.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamState,
    batch: &[ClipSample],
    config: &TrainConfig,
) -> Result<LossValues> {
    model.params_mut().zero_grad();
    let values = accumulate_batch_grads(model, batch, config)?;
    let skipped = adam_step(model.params_mut(), optimizer, &config.adam())?;
    if config.debug_finite && !skipped.is_empty() {
        return Err(Error::NonFinite(format!("gradients of {}", skipped.join(", "))));
    }
    Ok(values)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub l_bce: f64,
    pub l_tc: f64,
    pub total: f64,
}

/// Training loop state, resumable from a checkpoint.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    /// Number of completed iterations.
    pub iteration: usize,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let optimizer = AdamState::for_params(model.params());
        Ok(Self {
            model,
            optimizer,
            config,
            iteration: 0,
        })
    }

    /// Restores model, optimizer and iteration counter from a checkpoint
    /// written by [`Trainer::save`].
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let records = crate::checkpoint::load(path)?;
        let model = Model::from_records(&records)?;
        let optimizer = AdamState::from_records(model.params(), &records)?;
        let iteration = records
            .iter()
            .find(|(n, _)| n == "train/iteration")
            .ok_or_else(|| Error::Format("checkpoint has no train/iteration".into()))?
            .1
            .item()? as usize;
        Ok(Self {
            model,
            optimizer,
            config,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = vec![(
            "train/iteration".to_string(),
            Tensor::scalar(self.iteration as f64),
        )];
        extra.extend(self.optimizer.to_records(self.model.params()));
        self.model.save_with(path, &extra)
    }

    /// Samples the batch of the next iteration. Depends only on the seed and
    /// the iteration number, so resumed runs see the same data.
    pub fn next_batch(&self, dataset: &Dataset) -> Result<Vec<ClipSample>> {
        let mut rng = iteration_rng(self.config.seed, self.iteration);
        (0..self.config.batch_size)
            .map(|_| {
                let video = rng.gen_range(0..dataset.videos.len());
                sample_clip(dataset, video, self.config.max_skip, &mut rng)
            })
            .collect()
    }

    pub fn step(&mut self, dataset: &Dataset) -> Result<LogRow> {
        let batch = self.next_batch(dataset)?;
        let v = train_step(&mut self.model, &mut self.optimizer, &batch, &self.config)
            .map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("{what} at iteration {}", self.iteration))
                }
                other => other,
            })?;
        let row = LogRow {
            iteration: self.iteration,
            l_bce: v.bce,
            l_tc: v.tc,
            total: v.total,
        };
        self.iteration += 1;
        Ok(row)
    }

    /// Runs until `config.iterations` iterations are complete, appending to
    /// `out_dir/train_log.csv` and writing `out_dir/checkpoint.mflw`.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        out_dir: &Path,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<TrainOutputs> {
        if dataset.videos.is_empty() {
            return Err(Error::Input("training dataset has no videos".into()));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.csv");
        let ckpt_path = out_dir.join("checkpoint.mflw");
        let fresh = self.iteration == 0;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        let started = Instant::now();
        let mut rows = Vec::new();
        while self.iteration < self.config.iterations {
            let row = self.step(dataset)?;
            log.serialize(row)
                .map_err(|e| Error::Format(format!("training log: {e}")))?;
            on_row(&row);
            rows.push(row);
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration % every == 0 {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                self.save(&ckpt_path)?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        self.save(&ckpt_path)?;
        Ok(TrainOutputs {
            checkpoint: ckpt_path,
            log: log_path,
            rows,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub rows: Vec<LogRow>,
    pub seconds: f64,
}

/// Reads a training log written by [`Trainer::run`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
