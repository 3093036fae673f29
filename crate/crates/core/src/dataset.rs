//! Videos with per-frame ground-truth masks and the on-disk dataset layout
//! `root/video_####/{frames,masks}/%05d.png`.

use crate::error::{Error, Result};
use crate::io::{self, Frame, Mask};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Video {
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

pub fn video_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("video_{index:04}"))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        for (i, video) in self.videos.iter().enumerate() {
            write_video(&video_dir(root, i), video)?;
        }
        Ok(())
    }

    /// Loads every `video_*` directory under `root`, in name order.
    pub fn load(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            let is_video = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("video_"));
            if is_video && path.is_dir() {
                dirs.push(path);
            }
        }
        dirs.sort();
        let videos = dirs.iter().map(|d| read_video(d)).collect::<Result<_>>()?;
        Ok(Self { videos })
    }

    /// Splits off the last `n` videos.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.videos.len().saturating_sub(n);
        let tail = self.videos.split_off(at);
        (self, Self { videos: tail })
    }
}

pub fn write_video(dir: &Path, video: &Video) -> Result<()> {
    let frames = dir.join("frames");
    let masks = dir.join("masks");
    for d in [&frames, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, (f, m)) in video.frames.iter().zip(&video.masks).enumerate() {
        io::write_frame(&frames.join(io::frame_file_name(i)), f)?;
        io::write_mask(&masks.join(io::frame_file_name(i)), m)?;
    }
    Ok(())
}

pub fn read_video(dir: &Path) -> Result<Video> {
    let frames = io::read_frame_dir(&dir.join("frames"))?;
    let mask_paths = io::list_pngs(&dir.join("masks"))?;
    if mask_paths.len() != frames.len() {
        return Err(Error::Input(format!(
            "{}: {} frames but {} masks",
            dir.display(),
            frames.len(),
            mask_paths.len()
        )));
    }
    let masks = mask_paths
        .iter()
        .map(|p| io::read_mask(p))
        .collect::<Result<Vec<_>>>()?;
    for (p, (m, f)) in mask_paths.iter().zip(masks.iter().zip(&frames)) {
        if m.resolution() != f.resolution() {
            return Err(Error::Input(format!(
                "mask {} does not match its frame resolution",
                p.display()
            )));
        }
    }
    Ok(Video { frames, masks })
}
