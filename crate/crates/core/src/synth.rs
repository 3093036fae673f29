//! Synthetic moving-shape videos with exact ground-truth masks.
//!
//! Each video holds one ellipse or star-shaped polygon drifting over a
//! smooth textured background. The shape bounces off an inner margin so its
//! centre never leaves the frame, rotates and breathes in proportion to the
//! distance travelled (a zero-velocity video is therefore static), and is
//! rasterised by testing each pixel centre against the analytic shape.

use crate::dataset::{Dataset, Video};
use crate::error::{Error, Result};
use crate::io::{Frame, Mask};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Polygon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// `(height, width)`
    pub resolution: (usize, usize),
    pub video_length: usize,
    pub num_videos: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Shape radius range as a fraction of the smaller image side.
    pub radius_range: (f64, f64),
    /// Speed range in pixels per frame.
    pub velocity_range: (f64, f64),
    /// Relative radius oscillation amplitude.
    pub deformation: f64,
    /// Seed of the background textures; `seed` drives everything else.
    pub texture_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: (128, 128),
            video_length: 20,
            num_videos: 200,
            shape_kinds: vec![ShapeKind::Ellipse, ShapeKind::Polygon],
            radius_range: (0.1, 0.22),
            velocity_range: (0.5, 3.0),
            deformation: 0.15,
            texture_seed: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("resolution {h}x{w} is below 8x8")));
        }
        if self.video_length == 0 || self.num_videos == 0 {
            return Err(Error::Config("video_length and num_videos must be positive".into()));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("no shape kinds".into()));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 < 0.5) {
            return Err(Error::Config(format!("radius range ({r0}, {r1})")));
        }
        let (v0, v1) = self.velocity_range;
        if !(v0 >= 0.0 && v0 <= v1) {
            return Err(Error::Config(format!("velocity range ({v0}, {v1})")));
        }
        if !(0.0..0.5).contains(&self.deformation) {
            return Err(Error::Config(format!("deformation {}", self.deformation)));
        }
        Ok(())
    }
}

/// Analytic shape at one frame, in pixel coordinates where pixel `(x, y)`
/// covers `[x, x+1) x [y, y+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeState {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Semi-axes along the rotated x and y directions.
    pub radii: (f64, f64),
    pub rotation: f64,
    /// Polygon only: vertex angles (ascending, in the shape frame) and
    /// relative radii.
    pub vertex_angles: Vec<f64>,
    pub vertex_scales: Vec<f64>,
}

impl ShapeState {
    /// Polygon vertices in image coordinates (empty for ellipses).
    pub fn vertices(&self) -> Vec<(f64, f64)> {
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        self.vertex_angles
            .iter()
            .zip(&self.vertex_scales)
            .map(|(&a, &k)| {
                let lx = self.radii.0 * k * a.cos();
                let ly = self.radii.1 * k * a.sin();
                (self.center.0 + c * lx - s * ly, self.center.1 + s * lx + c * ly)
            })
            .collect()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Ellipse => {
                let (dx, dy) = (x - self.center.0, y - self.center.1);
                let (c, s) = (self.rotation.cos(), self.rotation.sin());
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / self.radii.0).powi(2) + (v / self.radii.1).powi(2) <= 1.0
            }
            ShapeKind::Polygon => point_in_polygon(&self.vertices(), x, y),
        }
    }

    pub fn rasterize(&self, width: usize, height: usize) -> Mask {
        let vs = self.vertices();
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                data.push(match self.kind {
                    ShapeKind::Ellipse => self.contains(px, py),
                    ShapeKind::Polygon => point_in_polygon(&vs, px, py),
                });
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }
}

/// Even-odd crossing test.
fn point_in_polygon(vs: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = vs.len() - 1;
    for i in 0..vs.len() {
        let (xi, yi) = vs[i];
        let (xj, yj) = vs[j];
        if (yi > y) != (yj > y) && x < xj + (y - yj) * (xi - xj) / (yi - yj) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// One generated video with the per-frame analytic shapes.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub video: Video,
    pub shapes: Vec<ShapeState>,
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// A smooth per-video pattern: a few random plane waves per channel.
struct Texture {
    base: [f64; 3],
    waves: Vec<(usize, f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, base: [f64; 3], amplitude: f64, max_freq: f64) -> Self {
        let waves = (0..6)
            .map(|i| {
                let angle = rng.gen_range(0.0..PI);
                let freq = rng.gen_range(0.2 * max_freq..max_freq);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = rng.gen_range(0.3..1.0) * amplitude;
                (i % 3, angle, freq, phase, amp)
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for &(ch, angle, freq, phase, amp) in &self.waves {
            let t = x * angle.cos() + y * angle.sin();
            c[ch] += amp * (freq * t + phase).sin();
        }
        c
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generates video `index` of the dataset described by `config`.
pub fn generate_video(config: &SynthConfig, index: usize) -> Result<SynthVideo> {
    config.validate()?;
    let (h, w) = config.resolution;
    let mut rng = video_rng(config.seed, index);
    let mut tex_rng = video_rng(config.texture_seed ^ 0x9e37_79b9_7f4a_7c15, index);

    let side = h.min(w) as f64;
    let kind = config.shape_kinds[rng.gen_range(0..config.shape_kinds.len())];
    let r = rng.gen_range(config.radius_range.0..=config.radius_range.1) * side;
    let aspect = rng.gen_range(0.6..1.0);
    let base_radii = if rng.gen_bool(0.5) {
        (r, r * aspect)
    } else {
        (r * aspect, r)
    };
    let (vertex_angles, vertex_scales) = match kind {
        ShapeKind::Ellipse => (Vec::new(), Vec::new()),
        ShapeKind::Polygon => {
            let n = rng.gen_range(3..=7);
            let step = 2.0 * PI / n as f64;
            (0..n)
                .map(|i| {
                    let a = i as f64 * step + rng.gen_range(-0.3..0.3) * step;
                    (a, rng.gen_range(0.75..1.15))
                })
                .unzip()
        }
    };
    let margin_x = (0.2 * w as f64).max(1.0);
    let margin_y = (0.2 * h as f64).max(1.0);
    let (lo_x, hi_x) = (margin_x, w as f64 - margin_x);
    let (lo_y, hi_y) = (margin_y, h as f64 - margin_y);
    let mut center = (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
    let speed = rng.gen_range(config.velocity_range.0..=config.velocity_range.1);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let mut vel = (speed * heading.cos(), speed * heading.sin());
    let rotation0 = rng.gen_range(0.0..2.0 * PI);
    let spin = rng.gen_range(-0.02..0.02);
    let breath_rate = rng.gen_range(0.05..0.15);
    let breath_phase = rng.gen_range(0.0..2.0 * PI);

    let bg_base = random_color(&mut tex_rng);
    let fg_base = loop {
        let c = random_color(&mut rng);
        if color_distance(c, bg_base) > 120.0 {
            break c;
        }
    };
    let bg = Texture::new(&mut tex_rng, bg_base, 25.0, 0.15);
    let fg = Texture::new(&mut rng, fg_base, 15.0, 0.3);
    let noise: Vec<f64> = (0..h * w * 3).map(|_| tex_rng.gen_range(-6.0..6.0)).collect();
    let mut background = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let c = bg.at(x as f64 + 0.5, y as f64 + 0.5);
            let at = (y * w + x) * 3;
            background.extend((0..3).map(|ch| to_u8(c[ch] + noise[at + ch])));
        }
    }

    let mut travelled = 0.0;
    let mut frames = Vec::with_capacity(config.video_length);
    let mut masks = Vec::with_capacity(config.video_length);
    let mut shapes = Vec::with_capacity(config.video_length);
    for t in 0..config.video_length {
        if t > 0 {
            let bounce = |p: f64, v: f64, lo: f64, hi: f64| {
                let mut p = p + v;
                let mut v = v;
                if p < lo {
                    p = 2.0 * lo - p;
                    v = -v;
                } else if p > hi {
                    p = 2.0 * hi - p;
                    v = -v;
                }
                (p.clamp(lo, hi), v)
            };
            let (x, vx) = bounce(center.0, vel.0, lo_x, hi_x);
            let (y, vy) = bounce(center.1, vel.1, lo_y, hi_y);
            center = (x, y);
            vel = (vx, vy);
            travelled += speed;
        }
        let breath = 1.0 + config.deformation * (breath_rate * travelled + breath_phase).sin();
        let shape = ShapeState {
            kind,
            center,
            radii: (base_radii.0 * breath, base_radii.1 / breath.sqrt()),
            rotation: rotation0 + spin * travelled,
            vertex_angles: vertex_angles.clone(),
            vertex_scales: vertex_scales.clone(),
        };
        let mask = shape.rasterize(w, h);
        let mut rgb = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let at = (y * w + x) * 3;
                if mask.get(y, x) {
                    let c = fg.at(px - center.0, py - center.1);
                    rgb.extend((0..3).map(|ch| to_u8(c[ch] + noise[at + ch])));
                } else {
                    rgb.extend_from_slice(&background[at..at + 3]);
                }
            }
        }
        frames.push(Frame {
            width: w,
            height: h,
            rgb,
        });
        masks.push(mask);
        shapes.push(shape);
    }
    Ok(SynthVideo {
        video: Video { frames, masks },
        shapes,
    })
}

/// All videos of `config`, in memory.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    let videos = (0..config.num_videos)
        .map(|i| generate_video(config, i).map(|v| v.video))
        .collect::<Result<_>>()?;
    Ok(Dataset { videos })
}
