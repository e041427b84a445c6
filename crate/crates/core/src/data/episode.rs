//! Landing episodes and their line-oriented text format:
//!
//! ```text
//! AMDN-EPISODE 1 id=<id> interval=<seconds> delta=<δ> l=nest-or-qr-box
//! <timestamp> <flag 0|1> <P1..P5> <tx|-> <ty|-> synth <scene params as JSON>
//! <timestamp> <flag 0|1> <P1..P5> <tx|-> <ty|-> file <image path>
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Image paths are
//! relative to the episode file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{synth_scene, NestParams, SceneParams};
use super::Sample;
use crate::error::{Error, Result};

pub const EPISODE_MAGIC: &str = "AMDN-EPISODE";
const EPISODE_VERSION: u32 = 1;
const LENGTH_SOURCE: &str = "nest-or-qr-box";

/// Landing phase label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl Phase {
    const ALL: [Phase; 5] = [Phase::P1, Phase::P2, Phase::P3, Phase::P4, Phase::P5];

    pub fn name(self) -> &'static str {
        ["P1", "P2", "P3", "P4", "P5"][self as usize]
    }

    pub fn parse(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Equal fifths of the episode.
    fn at(frame: usize, frames: usize) -> Phase {
        Phase::ALL[(frame * 5 / frames.max(1)).min(4)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameSource {
    Synthetic(SceneParams),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFrame {
    pub timestamp: f64,
    pub source: FrameSource,
    pub deviating: bool,
    /// True target point when known.
    pub target: Option<(f64, f64)>,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub frame_interval: f64,
    pub delta: f64,
    pub frames: Vec<EpisodeFrame>,
}

impl Episode {
    /// Timestamp of the first deviating frame.
    pub fn onset(&self) -> Option<f64> {
        self.frames.iter().find(|f| f.deviating).map(|f| f.timestamp)
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(Error::Episode(format!("invalid episode id {:?}", self.id)));
        }
        if !(self.frame_interval > 0.0) || !(self.delta > 0.0) {
            return Err(Error::Episode("frame interval and delta must be positive".into()));
        }
        if self.frames.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::Episode(format!("{}: timestamps not strictly increasing", self.id)));
        }
        Ok(())
    }

    pub fn render(&self, frame: usize) -> Result<Sample> {
        let f = self
            .frames
            .get(frame)
            .ok_or_else(|| Error::Episode(format!("{}: no frame {frame}", self.id)))?;
        match &f.source {
            FrameSource::Synthetic(p) => synth_scene(p),
            FrameSource::File(path) => {
                let image = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
                Ok(Sample { image: image.to_rgb8(), instances: Vec::new() })
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{EPISODE_MAGIC} {EPISODE_VERSION} id={} interval={} delta={} l={LENGTH_SOURCE}\n",
            self.id, self.frame_interval, self.delta
        );
        for f in &self.frames {
            let (tx, ty) = f.target.map_or(("-".to_string(), "-".to_string()), |(x, y)| (x.to_string(), y.to_string()));
            let source = match &f.source {
                FrameSource::Synthetic(p) => format!("synth {}", serde_json::to_string(p).expect("scene params serialize")),
                FrameSource::File(p) => format!("file {}", p.display()),
            };
            writeln!(s, "{} {} {} {tx} {ty} {source}", f.timestamp, f.deviating as u8, f.phase.name()).expect("string write");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_episode(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| Error::Episode(format!("{}: {e}", path.display())))
    }
}

/// Parses episode text; file sources are resolved against `base`.
pub fn parse_episode(text: &str, base: &Path) -> Result<Episode> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or_else(|| Error::Episode("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(EPISODE_MAGIC) {
        return Err(Error::Episode("missing episode header".into()));
    }
    if parts.next() != Some(&EPISODE_VERSION.to_string()) {
        return Err(Error::Episode("unsupported episode version".into()));
    }
    let (mut id, mut interval, mut delta, mut l) = (None, None, None, None);
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Episode(format!("bad header field {kv:?}")))?;
        let num = || v.parse::<f64>().map_err(|_| Error::Episode(format!("bad number in {kv:?}")));
        match k {
            "id" => id = Some(v.to_string()),
            "interval" => interval = Some(num()?),
            "delta" => delta = Some(num()?),
            "l" => l = Some(v.to_string()),
            _ => return Err(Error::Episode(format!("unknown header field {k:?}"))),
        }
    }
    if l.as_deref() != Some(LENGTH_SOURCE) {
        return Err(Error::Episode(format!("length source must be {LENGTH_SOURCE}")));
    }
    let missing = |f: &str| Error::Episode(format!("header lacks {f}"));
    let mut episode = Episode {
        id: id.ok_or_else(|| missing("id"))?,
        frame_interval: interval.ok_or_else(|| missing("interval"))?,
        delta: delta.ok_or_else(|| missing("delta"))?,
        frames: Vec::new(),
    };
    for (no, line) in lines {
        let err = |m: &str| Error::Episode(format!("line {}: {m}", no + 1));
        let mut f = line.splitn(6, ' ');
        let mut field = |name: &str| f.next().ok_or_else(|| err(&format!("missing {name}")));
        let timestamp: f64 = field("timestamp")?.parse().map_err(|_| err("bad timestamp"))?;
        let deviating = match field("flag")? {
            "0" => false,
            "1" => true,
            _ => return Err(err("flag must be 0 or 1")),
        };
        let phase = Phase::parse(field("phase")?).ok_or_else(|| err("bad phase"))?;
        let (tx, ty) = (field("target x")?, field("target y")?);
        let target = match (tx, ty) {
            ("-", "-") => None,
            _ => Some((tx.parse().map_err(|_| err("bad target"))?, ty.parse().map_err(|_| err("bad target"))?)),
        };
        let rest = field("source")?;
        let source = match rest.split_once(' ') {
            Some(("synth", json)) => FrameSource::Synthetic(serde_json::from_str(json).map_err(|e| err(&e.to_string()))?),
            Some(("file", path)) => FrameSource::File(base.join(path)),
            _ => return Err(err("source must be `synth <json>` or `file <path>`")),
        };
        episode.frames.push(EpisodeFrame { timestamp, source, deviating, target, phase });
    }
    episode.validate()?;
    Ok(episode)
}

/// Scripted offset of the nest from the frame center over time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Drift {
    None,
    /// Constant offset from `at` seconds on.
    Step { at: f64, offset: (f64, f64) },
    /// Offset growing at `velocity` pixels per second from `start` on.
    Ramp { start: f64, velocity: (f64, f64) },
}

impl Drift {
    pub fn offset(&self, t: f64) -> (f64, f64) {
        match *self {
            Drift::None => (0.0, 0.0),
            Drift::Step { at, offset } => if t >= at - 1e-9 { offset } else { (0.0, 0.0) },
            Drift::Ramp { start, velocity } => {
                let dt = (t - start).max(0.0);
                (velocity.0 * dt, velocity.1 * dt)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeParams {
    pub id: String,
    pub frames: usize,
    pub frame_interval: f64,
    pub delta: f64,
    pub size: usize,
    /// Nest side at the first and last frame; the nest grows as the UAV descends.
    pub nest_side: (f64, f64),
    pub drift: Drift,
    pub seed: u64,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            id: "episode".into(),
            frames: 50,
            frame_interval: 0.1,
            delta: 0.5,
            size: 128,
            nest_side: (20.0, 32.0),
            drift: Drift::None,
            seed: 0,
        }
    }
}

/// `k · Δt` rounded to the microsecond.
fn frame_time(k: usize, dt: f64) -> f64 {
    (k as f64 * dt * 1e6).round() / 1e6
}

/// Builds a scripted episode. Nest edges snap to whole pixels, so the
/// rendered mask centroid equals the recorded target point and each ground
/// truth flag is exactly `d / l > δ` for the rendered frame.
pub fn synth_episode(params: &EpisodeParams) -> Result<Episode> {
    let size = params.size as f64;
    let c = size / 2.0;
    let mut frames = Vec::with_capacity(params.frames);
    for k in 0..params.frames {
        let t = frame_time(k, params.frame_interval);
        let frac = if params.frames > 1 { k as f64 / (params.frames - 1) as f64 } else { 0.0 };
        let side = (params.nest_side.0 + (params.nest_side.1 - params.nest_side.0) * frac).round().max(1.0);
        let (ox, oy) = params.drift.offset(t);
        let x1 = (c + ox - side / 2.0).round();
        let y1 = (c + oy - side / 2.0).round();
        let target = (x1 + side / 2.0, y1 + side / 2.0);
        let d = ((c - target.0).powi(2) + (c - target.1).powi(2)).sqrt();
        let scene = SceneParams {
            width: params.size,
            height: params.size,
            house: Some([1.0, 1.0, size - 2.0, size - 2.0]),
            nest: Some(NestParams { center: target, size: (side, side), rotation_deg: 0.0 }),
            qr: None,
            illumination: 1.0,
            blur_radius: 0,
            noise: 0.02,
            seed: params.seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
        };
        scene.validate().map_err(|e| Error::Episode(format!("{} frame {k}: {e}", params.id)))?;
        frames.push(EpisodeFrame {
            timestamp: t,
            source: FrameSource::Synthetic(scene),
            deviating: d / side > params.delta,
            target: Some(target),
            phase: Phase::at(k, params.frames),
        });
    }
    let episode = Episode { id: params.id.clone(), frame_interval: params.frame_interval, delta: params.delta, frames };
    episode.validate()?;
    Ok(episode)
}
