use crate::cli::{Cli, Command, EmptyArg, EvalArgs, InfoArgs, PropagateArgs, ServeArgs, SynthArgs, TrainArgs};
use crate::error::CliError;
use crate::service::{self, AppState};
use crate::session::{Resolution, StoreConfig};
use memflow_core::config::ConfigFile;
use memflow_core::metrics::{evaluate_sequence, EmptyPolicy};
use memflow_core::propagate::propagate;
use memflow_core::training::LogRow;
use memflow_core::{
    io, synth, Dataset, MetricsConfig, Model, ModelConfig, PropagationConfig, SynthConfig, TrainConfig,
    Trainer,
};
use serde_json::{json, Value};
use std::path::Path;

/// What a command reports on success.
pub struct Output {
    pub text: String,
    pub json: Value,
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    let mut config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    for assignment in &cli.set {
        config.set_assignment(assignment)?;
    }
    match &cli.command {
        Command::Synth(a) => synth_cmd(config, a),
        Command::Train(a) => train_cmd(config, a),
        Command::Propagate(a) => propagate_cmd(config, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve_cmd(config, a),
        Command::Info(a) => info_cmd(config, a),
    }
}

fn set_opt(config: &mut ConfigFile, key: &str, value: &Option<impl ToString>) {
    if let Some(v) = value {
        config.set(key, v.to_string());
    }
}

fn synth_config(config: &ConfigFile) -> Result<SynthConfig, CliError> {
    let mut s = SynthConfig::default();
    config.apply_synth(&mut s)?;
    Ok(s)
}

fn train_config(config: &ConfigFile) -> Result<TrainConfig, CliError> {
    let mut t = TrainConfig::default();
    config.apply_train(&mut t)?;
    Ok(t)
}

fn propagation_config(config: &ConfigFile) -> Result<PropagationConfig, CliError> {
    let mut p = PropagationConfig::default();
    config.apply_propagation(&mut p)?;
    p.validate()?;
    Ok(p)
}

fn model_config(config: &ConfigFile) -> Result<ModelConfig, CliError> {
    let mut m = ModelConfig::default();
    config.apply_model(&mut m)?;
    m.validate()?;
    Ok(m)
}

fn synth_cmd(mut config: ConfigFile, a: &SynthArgs) -> Result<Output, CliError> {
    set_opt(&mut config, "synth.seed", &a.seed);
    set_opt(&mut config, "synth.num_videos", &a.num_videos);
    set_opt(&mut config, "synth.video_length", &a.video_length);
    set_opt(&mut config, "synth.resolution", &a.resolution);
    config.check_sections()?;
    let cfg = synth_config(&config)?;
    let data = synth::generate_dataset(&cfg)?;
    data.write(&a.out)?;
    let (h, w) = cfg.resolution;
    Ok(Output {
        text: format!(
            "wrote {} videos of {} frames ({w}x{h}) to {}",
            cfg.num_videos,
            cfg.video_length,
            a.out.display()
        ),
        json: json!({ "out": a.out, "config": cfg }),
    })
}

fn train_cmd(mut config: ConfigFile, a: &TrainArgs) -> Result<Output, CliError> {
    set_opt(&mut config, "train.iterations", &a.iterations);
    set_opt(&mut config, "train.batch_size", &a.batch_size);
    set_opt(&mut config, "train.learning_rate", &a.learning_rate);
    set_opt(&mut config, "train.seed", &a.seed);
    set_opt(&mut config, "loss.beta", &a.beta);
    set_opt(&mut config, "model.preset", &a.preset);
    config.check_sections()?;
    let train = train_config(&config)?;
    let data = Dataset::load(&a.data)?;
    let first = data
        .videos
        .first()
        .and_then(|v| v.frames.first())
        .ok_or_else(|| CliError::Runtime(format!("{} holds no video frames", a.data.display())))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if config.keys().any(|k| k.starts_with("model.")) {
                log::warn!("model settings are taken from {}; ignoring model.* keys", path.display());
            }
            Trainer::resume(path, train)?
        }
        None => {
            if config.get("model.input_resolution").is_none() {
                config.set("model.input_resolution", format!("{}x{}", first.width, first.height));
            }
            Trainer::new(model_config(&config)?, train)?
        }
    };
    let (h, w) = trainer.model.resolution();
    if first.resolution() != (h, w) {
        return Err(CliError::Runtime(format!(
            "dataset frames are {}x{}, the model expects {w}x{h}",
            first.width, first.height
        )));
    }
    log::info!(
        "training {} parameters for {} iterations (seed {}, starting at {})",
        trainer.model.params().num_scalars(),
        trainer.config.iterations,
        trainer.config.seed,
        trainer.iteration
    );
    let every = (trainer.config.iterations / 20).max(1);
    let report = |r: &LogRow| {
        if (r.iteration + 1) % every == 0 {
            log::info!(
                "iteration {}: bce {:.4} tc {:.4} total {:.4}",
                r.iteration + 1,
                r.l_bce,
                r.l_tc,
                r.total
            );
        }
    };
    let out = trainer.run(&data, &a.out, report)?;
    let last = out.rows.last().copied();
    Ok(Output {
        text: format!(
            "trained to iteration {} in {:.1} s; checkpoint {}; log {}",
            trainer.iteration,
            out.seconds,
            out.checkpoint.display(),
            out.log.display()
        ),
        json: json!({
            "checkpoint": out.checkpoint,
            "log": out.log,
            "iterations": trainer.iteration,
            "seed": trainer.config.seed,
            "seconds": out.seconds,
            "last": last,
        }),
    })
}

fn propagate_cmd(mut config: ConfigFile, a: &PropagateArgs) -> Result<Output, CliError> {
    set_opt(&mut config, "propagate.memory_stride", &a.memory_stride);
    set_opt(&mut config, "propagate.threshold", &a.threshold);
    set_opt(&mut config, "propagate.start_frame", &a.start_frame);
    config.check_sections()?;
    let cfg = propagation_config(&config)?;
    let model = Model::load(&a.checkpoint)?;
    let paths = io::list_pngs(&a.frames)?;
    let frames = io::read_frame_dir(&a.frames)?;
    let mask = io::read_mask(&a.mask)?;
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let result = propagate(&model, &frames, &mask, &cfg, |done, total| {
        log::debug!("segmented {done}/{total}");
    })?;
    result.write(&a.out, &names, !a.no_probabilities)?;
    let mean_ms = result.timing_ms.iter().sum::<f64>() / result.timing_ms.len() as f64;
    Ok(Output {
        text: format!(
            "segmented {} frames into {} (memory frames {:?}, {mean_ms:.1} ms/frame)",
            result.masks().count(),
            a.out.join("masks").display(),
            result.memory_frames
        ),
        json: json!({
            "out": a.out,
            "frames": result.masks().count(),
            "memory_frames": result.memory_frames,
            "timing_ms": result.timing_ms,
        }),
    })
}

fn eval_cmd(a: &EvalArgs) -> Result<Output, CliError> {
    let cfg = MetricsConfig {
        tolerance_px: a.tolerance_px,
        empty: match a.empty {
            Some(EmptyArg::NanSkip) => EmptyPolicy::NanSkip,
            _ => EmptyPolicy::One,
        },
    };
    let report = evaluate_sequence(&a.pred, &a.gt, &cfg)?;
    if let Some(dir) = &a.out {
        report.write(dir)?;
    }
    let text = match &report.mean {
        Some(m) => format!(
            "J {:.4}  F {:.4}  Dice {:.4}  ({} frames, tolerance {} px)",
            m.j, m.f, m.dice, report.frames_scored, report.tolerance_px
        ),
        None => "no frames to score (the first frame is excluded)".to_string(),
    };
    let json: Value = serde_json::from_str(&report.to_json())
        .map_err(|e| CliError::Runtime(format!("metrics report: {e}")))?;
    Ok(Output { text, json })
}

fn serve_cmd(config: ConfigFile, a: &ServeArgs) -> Result<Output, CliError> {
    config.check_sections()?;
    let cfg = propagation_config(&config)?;
    let model = Model::load(&a.checkpoint)?;
    let (h, w) = model.resolution();
    let store = StoreConfig {
        model_checkpoint: a.checkpoint.display().to_string(),
        resolution: Resolution { width: w, height: h },
        memory_stride: cfg.memory_stride,
        threshold: cfg.binarize_threshold,
    };
    let state = AppState::new(&a.data_dir, model, store)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start the async runtime: {e}")))?;
    let addr = format!("{}:{}", a.host, a.port);
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!("memflow listening on http://{local}");
        service::serve(listener, state)
            .await
            .map_err(|e| CliError::Runtime(format!("server stopped: {e}")))
    })?;
    Ok(Output {
        text: "server stopped".into(),
        json: json!({ "stopped": true }),
    })
}

fn info_cmd(config: ConfigFile, a: &InfoArgs) -> Result<Output, CliError> {
    if let Some(path) = &a.checkpoint {
        return checkpoint_info(path);
    }
    if let Some(dir) = &a.data {
        let data = Dataset::load(dir)?;
        let frames: Vec<usize> = data.videos.iter().map(|v| v.len()).collect();
        let res = data.videos.first().and_then(|v| v.frames.first()).map(|f| (f.width, f.height));
        return Ok(Output {
            text: format!(
                "{} videos, {} frames in total, resolution {}",
                data.len(),
                frames.iter().sum::<usize>(),
                res.map_or("n/a".into(), |(w, h)| format!("{w}x{h}"))
            ),
            json: json!({ "videos": data.len(), "frames_per_video": frames, "resolution": res }),
        });
    }
    config.check_sections()?;
    let json = json!({
        "model": model_config(&config)?,
        "train": train_config(&config)?,
        "synth": synth_config(&config)?,
        "propagate": propagation_config(&config)?,
    });
    Ok(Output {
        text: serde_json::to_string_pretty(&json).expect("configuration serialises"),
        json,
    })
}

fn checkpoint_info(path: &Path) -> Result<Output, CliError> {
    let records = memflow_core::checkpoint::load(path)?;
    let model = Model::from_records(&records)?;
    let iteration = records
        .iter()
        .find(|(n, _)| n == "train/iteration")
        .and_then(|(_, t)| t.item().ok())
        .map(|v| v as usize);
    let params = model.params().num_scalars();
    let (h, w) = model.resolution();
    Ok(Output {
        text: format!(
            "{}: {params} parameters in {} tensors, input {w}x{h}, trained iterations {}",
            path.display(),
            model.params().len(),
            iteration.map_or("unknown".into(), |i| i.to_string())
        ),
        json: json!({
            "checkpoint": path,
            "parameters": params,
            "tensors": model.params().len(),
            "iteration": iteration,
            "model": model.config(),
        }),
    })
}
