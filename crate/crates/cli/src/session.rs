//! Annotation sessions persisted under `data-dir/sessions/{id}/`.
//!
//! ```text
//! meta.json     session state (written last, via rename)
//! frames/       uploaded frames, %05d.png
//! masks_gt/     human masks (first frame and corrections)
//! masks_pred/   propagated masks
//! probs/        16-bit foreground probabilities
//! memory.mflw   memory bank of the last propagation, for corrections
//! ```

use crate::error::ServiceError;
use chrono::{DateTime, Utc};
use memflow_core::io::{self, frame_file_name};
use memflow_core::propagate::{propagate, repropagate_from, FrameResult};
use memflow_core::{Frame, MemoryBank, Model, PropagationConfig, PropagationResult};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Created,
    Annotated,
    Propagating,
    Done,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

/// Summary of the most recent propagation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub from_frame: usize,
    pub memory_frames: Vec<usize>,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub frame_count: usize,
    pub resolution: Resolution,
    pub state: SessionState,
    pub annotated_frames: BTreeSet<usize>,
    pub model_checkpoint: String,
    pub memory_stride: usize,
    pub threshold: f64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default)]
    pub last_run: Option<RunSummary>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub current: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Status {
    pub id: String,
    pub state: SessionState,
    pub progress: Progress,
    pub annotated_frames: BTreeSet<usize>,
    pub error: Option<String>,
}

/// A session on disk plus its in-memory lock and progress counters.
pub struct Session {
    dir: PathBuf,
    meta: Mutex<SessionMeta>,
    current: AtomicUsize,
    total: AtomicUsize,
}

/// A propagation accepted by [`Session::begin`] and not yet run.
#[derive(Debug)]
pub struct Job {
    /// `None` for a full propagation from frame 0.
    correction: Option<usize>,
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, SessionMeta> {
        self.meta.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn meta(&self) -> SessionMeta {
        self.lock().clone()
    }

    pub fn status(&self) -> Status {
        let m = self.lock();
        Status {
            id: m.id.clone(),
            state: m.state,
            progress: Progress {
                current: self.current.load(Ordering::Relaxed),
                total: self.total.load(Ordering::Relaxed),
            },
            annotated_frames: m.annotated_frames.clone(),
            error: m.error.clone(),
        }
    }

    fn frames_dir(&self) -> PathBuf {
        self.dir.join("frames")
    }

    fn gt_path(&self, frame: usize) -> PathBuf {
        self.dir.join("masks_gt").join(frame_file_name(frame))
    }

    fn pred_path(&self, frame: usize) -> PathBuf {
        self.dir.join("masks_pred").join(frame_file_name(frame))
    }

    fn prob_path(&self, frame: usize) -> PathBuf {
        self.dir.join("probs").join(frame_file_name(frame))
    }

    fn memory_path(&self) -> PathBuf {
        self.dir.join("memory.mflw")
    }

    pub fn submit_mask(&self, frame: usize, png: &[u8]) -> Result<SessionMeta, ServiceError> {
        let mask = io::decode_mask_png(png)
            .map_err(|e| ServiceError::unprocessable(format!("mask is not a readable PNG: {e}")))?;
        let mut m = self.lock();
        if frame >= m.frame_count {
            return Err(ServiceError::unprocessable(format!(
                "frame {frame} is outside a session of {} frames",
                m.frame_count
            )));
        }
        if (mask.width, mask.height) != (m.resolution.width, m.resolution.height) {
            return Err(ServiceError::unprocessable(format!(
                "mask is {}x{}, frames are {}x{}",
                mask.width, mask.height, m.resolution.width, m.resolution.height
            )));
        }
        if m.state == SessionState::Propagating {
            return Err(ServiceError::conflict("session is propagating"));
        }
        if m.annotated_frames.contains(&frame) {
            log::info!("session {}: replacing the mask of frame {frame}", m.id);
        }
        io::write_mask(&self.gt_path(frame), &mask)?;
        m.annotated_frames.insert(frame);
        if m.state == SessionState::Created {
            m.state = SessionState::Annotated;
        }
        touch_and_save(&self.dir, &mut m)?;
        Ok(m.clone())
    }

    /// Moves the session to `propagating` if the request is admissible.
    pub fn begin(&self, correction: Option<usize>) -> Result<Job, ServiceError> {
        let mut m = self.lock();
        if m.state == SessionState::Propagating {
            return Err(ServiceError::conflict("session is already propagating"));
        }
        match correction {
            None if !m.annotated_frames.contains(&0) => {
                return Err(ServiceError::conflict("frame 0 has no mask; submit one before propagating"));
            }
            Some(k) if k >= m.frame_count => {
                return Err(ServiceError::unprocessable(format!(
                    "frame {k} is outside a session of {} frames",
                    m.frame_count
                )));
            }
            Some(k) if !m.annotated_frames.contains(&k) => {
                return Err(ServiceError::conflict(format!(
                    "frame {k} has no submitted mask to correct with"
                )));
            }
            Some(_) if m.last_run.is_none() || !self.memory_path().exists() => {
                return Err(ServiceError::conflict("correct only after a completed propagation"));
            }
            _ => {}
        }
        m.state = SessionState::Propagating;
        m.error = None;
        let from = correction.unwrap_or(0);
        self.current.store(from, Ordering::Relaxed);
        self.total.store(m.frame_count, Ordering::Relaxed);
        touch_and_save(&self.dir, &mut m)?;
        Ok(Job { correction })
    }

    /// Runs an accepted job to completion, leaving the session `done` or
    /// `error`.
    pub fn run(&self, job: Job, model: &Model) {
        let outcome = self.execute(&job, model);
        let mut m = self.lock();
        match outcome {
            Ok(summary) => {
                m.state = SessionState::Done;
                m.last_run = Some(summary);
            }
            Err(e) => {
                log::error!("session {}: propagation failed: {e}", m.id);
                m.state = SessionState::Error;
                m.error = Some(e.to_string());
            }
        }
        if let Err(e) = touch_and_save(&self.dir, &mut m) {
            log::error!("session {}: cannot save metadata: {e}", m.id);
        }
    }

    fn execute(&self, job: &Job, model: &Model) -> memflow_core::Result<RunSummary> {
        let meta = self.meta();
        let config = PropagationConfig {
            memory_stride: meta.memory_stride,
            binarize_threshold: meta.threshold,
            ..Default::default()
        };
        let frames = io::read_frame_dir(&self.frames_dir())?;
        let started = Instant::now();
        let progress = |done: usize, _total: usize| self.current.store(done, Ordering::Relaxed);
        let (result, from) = match job.correction {
            None => {
                let mask = io::read_mask(&self.gt_path(0))?;
                (propagate(model, &frames, &mask, &config, progress)?, 0)
            }
            Some(k) => {
                let previous = self.load_result(config)?;
                let mask = io::read_mask(&self.gt_path(k))?;
                (repropagate_from(model, &frames, &previous, &mask, k, progress)?, k)
            }
        };
        for (t, f) in result.frames.iter().enumerate().skip(from) {
            let Some(f) = f else { continue };
            io::write_mask(&self.pred_path(t), &f.mask)?;
            io::write_probability(&self.prob_path(t), f.mask.width, f.mask.height, &f.probability)?;
        }
        result.memory.save(&self.memory_path())?;
        Ok(RunSummary {
            from_frame: from,
            memory_frames: result.memory_frames,
            millis: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Rebuilds the last result from disk. Probabilities come back quantised
    /// to 16 bits, which only matters for frames that are kept as they are.
    fn load_result(&self, config: PropagationConfig) -> memflow_core::Result<PropagationResult> {
        let n = self.meta().frame_count;
        let memory = MemoryBank::load(&self.memory_path())?;
        let mut frames = Vec::with_capacity(n);
        for t in 0..n {
            let path = self.pred_path(t);
            frames.push(if path.exists() {
                let mask = io::read_mask(&path)?;
                let (_, _, probability) = io::read_probability(&self.prob_path(t))?;
                Some(FrameResult { probability, mask })
            } else {
                None
            });
        }
        Ok(PropagationResult {
            frames,
            memory_frames: memory.frame_indices(),
            timing_ms: vec![0.0; n],
            memory,
            config,
        })
    }

    /// The propagated mask of a frame, or the submitted one if the frame has
    /// not been propagated.
    pub fn mask_png(&self, frame: usize) -> Result<Vec<u8>, ServiceError> {
        let n = self.lock().frame_count;
        if frame >= n {
            return Err(ServiceError::not_found(format!("frame {frame} of {n}")));
        }
        for path in [self.pred_path(frame), self.gt_path(frame)] {
            if path.exists() {
                return std::fs::read(&path)
                    .map_err(|e| memflow_core::Error::io(&path, e).into());
            }
        }
        Err(ServiceError::not_found(format!("frame {frame} has no mask yet")))
    }
}

fn touch_and_save(dir: &Path, meta: &mut SessionMeta) -> memflow_core::Result<()> {
    meta.updated_at = Utc::now();
    write_meta(dir, meta)
}

fn write_meta(dir: &Path, meta: &SessionMeta) -> memflow_core::Result<()> {
    let path = dir.join("meta.json");
    let tmp = dir.join("meta.json.tmp");
    let text = serde_json::to_string_pretty(meta).expect("session metadata serialises");
    std::fs::write(&tmp, text).map_err(|e| memflow_core::Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| memflow_core::Error::io(&path, e))
}

/// Settings shared by every session of one server.
#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub model_checkpoint: String,
    pub resolution: Resolution,
    pub memory_stride: usize,
    pub threshold: f64,
}

pub struct SessionStore {
    root: PathBuf,
    config: StoreConfig,
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
}

impl SessionStore {
    /// Opens (creating if needed) `data_dir/sessions` and loads every
    /// session in it. Sessions that were mid-propagation are marked failed.
    pub fn open(data_dir: &Path, config: StoreConfig) -> memflow_core::Result<Self> {
        let root = data_dir.join("sessions");
        std::fs::create_dir_all(&root).map_err(|e| memflow_core::Error::io(&root, e))?;
        let mut sessions = BTreeMap::new();
        let entries = std::fs::read_dir(&root).map_err(|e| memflow_core::Error::io(&root, e))?;
        for entry in entries {
            let dir = entry.map_err(|e| memflow_core::Error::io(&root, e))?.path();
            let path = dir.join("meta.json");
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| memflow_core::Error::io(&path, e))?;
            let mut meta: SessionMeta = serde_json::from_str(&text)
                .map_err(|e| memflow_core::Error::Format(format!("{}: {e}", path.display())))?;
            if meta.state == SessionState::Propagating {
                log::warn!("session {} was interrupted while propagating", meta.id);
                meta.state = SessionState::Error;
                meta.error = Some("propagation interrupted by a server restart".into());
                write_meta(&dir, &meta)?;
            }
            let total = meta.frame_count;
            sessions.insert(
                meta.id.clone(),
                Arc::new(Session {
                    dir,
                    meta: Mutex::new(meta),
                    current: AtomicUsize::new(0),
                    total: AtomicUsize::new(total),
                }),
            );
        }
        Ok(Self {
            root,
            config,
            sessions: Mutex::new(sessions),
        })
    }

    fn sessions(&self) -> MutexGuard<'_, BTreeMap<String, Arc<Session>>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found(format!("no session {id}")))
    }

    pub fn list(&self) -> Vec<SessionMeta> {
        self.sessions().values().map(|s| s.meta()).collect()
    }

    pub fn create(&self, frames: Vec<Frame>) -> Result<SessionMeta, ServiceError> {
        let Some(first) = frames.first() else {
            return Err(ServiceError::unprocessable("a session needs at least one frame"));
        };
        let (w, h) = (first.width, first.height);
        let offenders: Vec<String> = frames
            .iter()
            .enumerate()
            .filter(|(_, f)| (f.width, f.height) != (w, h))
            .map(|(i, f)| format!("frame {i} is {}x{}", f.width, f.height))
            .collect();
        if !offenders.is_empty() {
            return Err(ServiceError::unprocessable(format!(
                "mixed resolutions (frame 0 is {w}x{h}): {}",
                offenders.join(", ")
            )));
        }
        let want = self.config.resolution;
        if (w, h) != (want.width, want.height) {
            return Err(ServiceError::unprocessable(format!(
                "frames are {w}x{h}, the model expects {}x{}",
                want.width, want.height
            )));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        for sub in ["frames", "masks_gt", "masks_pred", "probs"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| memflow_core::Error::io(&d, e))?;
        }
        for (i, f) in frames.iter().enumerate() {
            io::write_frame(&dir.join("frames").join(frame_file_name(i)), f)?;
        }
        let now = Utc::now();
        let meta = SessionMeta {
            id: id.clone(),
            frame_count: frames.len(),
            resolution: Resolution { width: w, height: h },
            state: SessionState::Created,
            annotated_frames: BTreeSet::new(),
            model_checkpoint: self.config.model_checkpoint.clone(),
            memory_stride: self.config.memory_stride,
            threshold: self.config.threshold,
            created_at: now,
            updated_at: now,
            last_run: None,
            error: None,
        };
        write_meta(&dir, &meta)?;
        log::info!("session {id}: created with {} frames", frames.len());
        self.sessions().insert(
            id,
            Arc::new(Session {
                dir,
                meta: Mutex::new(meta.clone()),
                current: AtomicUsize::new(0),
                total: AtomicUsize::new(frames.len()),
            }),
        );
        Ok(meta)
    }
}
