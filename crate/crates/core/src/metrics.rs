//! Region similarity (Jaccard), contour accuracy (boundary F-measure) and
//! Dice, per frame and averaged over a sequence.

use crate::error::{Error, Result};
use crate::io::{self, Mask};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// What a metric returns when both masks (or both boundaries) are empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyPolicy {
    /// Score 1.0.
    #[default]
    One,
    /// Score NaN; the frame is left out of that metric's mean.
    NanSkip,
}

impl EmptyPolicy {
    fn value(self) -> f64 {
        match self {
            EmptyPolicy::One => 1.0,
            EmptyPolicy::NanSkip => f64::NAN,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Boundary match tolerance in pixels; `None` uses [`default_tolerance`].
    pub tolerance_px: Option<f64>,
    pub empty: EmptyPolicy,
}

/// `ceil(0.8%` of the image diagonal`)`.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

fn check_shapes(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.resolution() != b.resolution() {
        return Err(Error::shape(
            op,
            format!(
                "prediction is {}x{}, ground truth {}x{}",
                a.width, a.height, b.width, b.height
            ),
        ));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    (inter, na, nb)
}

pub fn jaccard_with(pred: &Mask, gt: &Mask, empty: EmptyPolicy) -> Result<f64> {
    check_shapes("jaccard", pred, gt)?;
    let (inter, np, ng) = overlap(pred, gt);
    let union = np + ng - inter;
    Ok(if union == 0 {
        empty.value()
    } else {
        inter as f64 / union as f64
    })
}

/// `|A n B| / |A u B|`, 1.0 when both are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    jaccard_with(pred, gt, EmptyPolicy::One)
}

pub fn dice_with(pred: &Mask, gt: &Mask, empty: EmptyPolicy) -> Result<f64> {
    check_shapes("dice", pred, gt)?;
    let (inter, np, ng) = overlap(pred, gt);
    Ok(if np + ng == 0 {
        empty.value()
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    })
}

/// `2|A n B| / (|A| + |B|)`, 1.0 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    dice_with(pred, gt, EmptyPolicy::One)
}

/// Foreground pixels with a 4-neighbour that is background or outside the image.
pub fn boundary(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut out = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1)
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x);
            out.set(y, x, edge);
        }
    }
    out
}

/// Fraction of `from` pixels lying within `tol` (Euclidean) of a `to` pixel.
fn matched_fraction(from: &Mask, to: &Mask, tol: f64) -> f64 {
    let r = tol.floor() as isize;
    let (w, h) = (from.width as isize, from.height as isize);
    let (mut hits, mut total) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !from.get(y as usize, x as usize) {
                continue;
            }
            total += 1;
            let hit = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    ((dx * dx + dy * dy) as f64) <= tol * tol
                        && (0..h).contains(&yy)
                        && (0..w).contains(&xx)
                        && to.get(yy as usize, xx as usize)
                })
            });
            hits += hit as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn contour_f_with(pred: &Mask, gt: &Mask, tolerance_px: f64, empty: EmptyPolicy) -> Result<f64> {
    check_shapes("contour_f", pred, gt)?;
    if !(tolerance_px >= 0.0) {
        return Err(Error::Config(format!("tolerance {tolerance_px} must be >= 0")));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.count(), bg.count());
    if np == 0 && ng == 0 {
        return Ok(empty.value());
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let precision = matched_fraction(&bp, &bg, tolerance_px);
    let recall = matched_fraction(&bg, &bp, tolerance_px);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Boundary F-measure with a pixel tolerance.
pub fn contour_f(pred: &Mask, gt: &Mask, tolerance_px: f64) -> Result<f64> {
    contour_f_with(pred, gt, tolerance_px, EmptyPolicy::One)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub index: usize,
    pub j: f64,
    pub f: f64,
    pub dice: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub j: f64,
    pub f: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameScore>,
    /// `None` when no frame was scored.
    pub mean: Option<MeanScores>,
    pub tolerance_px: f64,
    pub excluded_first_frame: bool,
    pub frames_scored: usize,
    pub empty_policy: EmptyPolicy,
}

fn nan_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .filter(|x| !x.is_nan())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    fn from_frames(frames: Vec<FrameScore>, tolerance_px: f64, empty: EmptyPolicy) -> Self {
        let mean = (!frames.is_empty()).then(|| MeanScores {
            j: nan_mean(frames.iter().map(|s| s.j)),
            f: nan_mean(frames.iter().map(|s| s.f)),
            dice: nan_mean(frames.iter().map(|s| s.dice)),
        });
        Self {
            frames_scored: frames.len(),
            frames,
            mean,
            tolerance_px,
            excluded_first_frame: true,
            empty_policy: empty,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per frame plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        w.write_record(["index", "j", "f", "dice"]).expect("in-memory write");
        for s in &self.frames {
            w.write_record([s.index.to_string(), fmt(s.j), fmt(s.f), fmt(s.dice)])
                .expect("in-memory write");
        }
        if let Some(m) = self.mean {
            w.write_record(["mean".to_string(), fmt(m.j), fmt(m.f), fmt(m.dice)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Scores frames `1..` of a sequence against ground truth.
pub fn score_sequence(preds: &[Mask], gts: &[Mask], config: &MetricsConfig) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} predicted masks for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let tol = match (config.tolerance_px, gts.first()) {
        (Some(t), _) => t,
        (None, Some(m)) => default_tolerance(m.height, m.width),
        (None, None) => 0.0,
    };
    if gts.len() <= 1 {
        log::warn!("sequence has {} frame(s); nothing to score after the first", gts.len());
    }
    let frames = preds
        .iter()
        .zip(gts)
        .enumerate()
        .skip(1)
        .map(|(index, (p, g))| {
            Ok(FrameScore {
                index,
                j: jaccard_with(p, g, config.empty)?,
                f: contour_f_with(p, g, tol, config.empty)?,
                dice: dice_with(p, g, config.empty)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_frames(frames, tol, config.empty))
}

/// Scores a directory of predicted masks against a directory of
/// ground-truth masks, matching files by name. The lexicographically first
/// ground-truth frame is the annotated one and is not scored.
pub fn evaluate_sequence(pred_dir: &Path, gt_dir: &Path, config: &MetricsConfig) -> Result<MetricsReport> {
    let gt_paths = io::list_pngs(gt_dir)?;
    let mut preds = Vec::with_capacity(gt_paths.len());
    let mut gts = Vec::with_capacity(gt_paths.len());
    for gt_path in &gt_paths {
        let name = gt_path.file_name().expect("listed file has a name");
        let pred_path = pred_dir.join(name);
        if !pred_path.is_file() {
            return Err(Error::MissingFrame(format!(
                "{} has no prediction in {}",
                name.to_string_lossy(),
                pred_dir.display()
            )));
        }
        preds.push(io::read_mask(&pred_path)?);
        gts.push(io::read_mask(gt_path)?);
    }
    score_sequence(&preds, &gts, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut m = Mask::empty(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn shifted_square() {
        let a = square(5, 5, 1, 1, 2);
        let b = square(5, 5, 2, 1, 2);
        assert_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn empty_conventions() {
        let e = Mask::empty(4, 4);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(contour_f(&e, &e, 2.0).unwrap(), 1.0);
        assert!(jaccard_with(&e, &e, EmptyPolicy::NanSkip).unwrap().is_nan());
        let s = square(4, 4, 1, 1, 2);
        assert_eq!(contour_f(&e, &s, 2.0).unwrap(), 0.0);
        assert_eq!(jaccard(&e, &s).unwrap(), 0.0);
    }

    #[test]
    fn boundary_of_filled_image_is_its_frame() {
        let full = square(4, 3, 0, 0, 3);
        let b = boundary(&square(5, 5, 0, 0, 5));
        assert_eq!(b.count(), 16);
        assert!(!b.get(2, 2));
        assert_eq!(boundary(&full).count(), 8);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Mask::empty(3, 3);
        let b = Mask::empty(3, 4);
        assert!(jaccard(&a, &b).is_err());
        assert!(dice(&a, &b).is_err());
        assert!(contour_f(&a, &b, 1.0).is_err());
    }

    #[test]
    fn default_tolerance_at_128() {
        assert_eq!(default_tolerance(128, 128), 2.0);
    }

    #[test]
    fn single_frame_sequence_is_empty_report() {
        let m = vec![square(4, 4, 0, 0, 2)];
        let r = score_sequence(&m, &m, &MetricsConfig::default()).unwrap();
        assert_eq!(r.frames_scored, 0);
        assert!(r.mean.is_none());
        assert!(r.to_json().contains("\"excluded_first_frame\": true"));
    }

    #[test]
    fn csv_mirrors_frames() {
        let m = vec![square(4, 4, 0, 0, 2); 3];
        let r = score_sequence(&m, &m, &MetricsConfig::default()).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,1,1,1"));
    }
}
