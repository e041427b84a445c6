//! Landing deviation decisions, the center-crop admission step, and the
//! frame-skipping episode runner.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, Class};
use crate::model::{DetectionBox, InstanceMask};

/// Side of the square model input the frames are cropped to.
pub const CROP_SIZE: usize = 640;

/// What one frame's perception produced.
#[derive(Clone, Debug, Default)]
pub struct SceneObservation {
    pub detections: Vec<DetectionBox>,
    pub masks: Vec<InstanceMask>,
    pub timestamp: f64,
    pub center: (f64, f64),
}

impl SceneObservation {
    fn instances(&self, class: Class) -> impl Iterator<Item = &InstanceMask> {
        self.masks.iter().filter(move |m| m.class == class)
    }

    fn has(&self, class: Class) -> bool {
        self.detections.iter().any(|d| d.class == class) || self.instances(class).next().is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetPreference {
    NestFirst,
    QrFirst,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviationPolicy {
    /// Threshold on `d / l`; deviating strictly above it.
    pub delta: f64,
    pub target: TargetPreference,
}

impl Default for DeviationPolicy {
    fn default() -> Self {
        Self { delta: 0.5, target: TargetPreference::NestFirst }
    }
}

impl DeviationPolicy {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { delta, ..Default::default() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reason {
    HouseCenterMiss,
    OffsetExceedsThreshold,
    TargetOutsideCrop,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::HouseCenterMiss => "house-center-miss",
            Reason::OffsetExceedsThreshold => "offset-exceeds-threshold",
            Reason::TargetOutsideCrop => "target-outside-crop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarningEvent {
    pub timestamp: f64,
    pub deviating: bool,
    /// Why the frame was flagged; absent when not deviating.
    pub reason: Option<Reason>,
    /// Offset distance and nest length, present iff the nest/QR branch ran.
    pub d: Option<f64>,
    pub l: Option<f64>,
}

impl fmt::Display for WarningEvent {
    /// `timestamp,deviating,reason,d,l` with `-` for absent fields.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
        write!(
            f,
            "{},{},{},{},{}",
            self.timestamp,
            self.deviating as u8,
            self.reason.map_or("-", Reason::as_str),
            opt(self.d),
            opt(self.l)
        )
    }
}

/// Writes one event per line.
pub fn write_alerts<W: Write>(mut out: W, events: &[WarningEvent]) -> Result<()> {
    for e in events {
        writeln!(out, "{e}")?;
    }
    Ok(())
}

/// Highest-scoring instance of a class together with its target point: the
/// mask centroid, or the box center when the mask is empty.
fn target_of(obs: &SceneObservation, class: Class) -> Option<((f64, f64), f64)> {
    if let Some(m) = obs.instances(class).max_by(|a, b| a.score.total_cmp(&b.score)) {
        let point = m.mask.centroid().unwrap_or_else(|| m.bbox.center());
        return Some((point, m.bbox.longer_side()));
    }
    obs.detections
        .iter()
        .filter(|d| d.class == class)
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .map(|d| (d.bbox.center(), d.bbox.longer_side()))
}

/// One frame's landing decision.
///
/// With a nest or QR code in view, the offset `d` between the vision center
/// and the target point is compared with the nest length `l` (longer side of
/// the nest box, else of the QR box): deviating iff `d / l > δ`. With only
/// houses in view, the UAV is on course iff the vision center lies in some
/// house mask. With nothing in view the target has left the crop.
pub fn decide(obs: &SceneObservation, policy: &DeviationPolicy) -> WarningEvent {
    let base = WarningEvent { timestamp: obs.timestamp, deviating: true, reason: None, d: None, l: None };
    let (cx, cy) = obs.center;
    let order = match policy.target {
        TargetPreference::NestFirst => [Class::Nest, Class::QrCode],
        TargetPreference::QrFirst => [Class::QrCode, Class::Nest],
    };
    let target = order.iter().find_map(|&c| target_of(obs, c));
    if let Some(((tx, ty), fallback_len)) = target {
        let l = target_of(obs, Class::Nest).map_or(fallback_len, |(_, len)| len);
        let d = ((cx - tx).powi(2) + (cy - ty).powi(2)).sqrt();
        let deviating = d / l > policy.delta;
        return WarningEvent {
            deviating,
            reason: deviating.then_some(Reason::OffsetExceedsThreshold),
            d: Some(d),
            l: Some(l),
            ..base
        };
    }
    if obs.has(Class::House) {
        let inside = obs.instances(Class::House).any(|m| m.mask.contains_point(cx, cy));
        return WarningEvent {
            deviating: !inside,
            reason: (!inside).then_some(Reason::HouseCenterMiss),
            ..base
        };
    }
    WarningEvent { reason: Some(Reason::TargetOutsideCrop), ..base }
}

/// Top-left corner `(row, col)` of the central `size × size` window.
pub fn crop_origin(height: usize, width: usize, size: usize) -> Result<(usize, usize)> {
    if height < size || width < size {
        return Err(Error::InvalidArgument(format!(
            "frame {width}x{height} is smaller than the {size}x{size} crop"
        )));
    }
    Ok(((height - size) / 2, (width - size) / 2))
}

/// Pixel-exact central window of a frame; no resampling.
pub fn center_crop(frame: &RgbImage, size: usize) -> Result<RgbImage> {
    let (r0, c0) = crop_origin(frame.height() as usize, frame.width() as usize, size)?;
    Ok(image::imageops::crop_imm(frame, c0 as u32, r0 as u32, size as u32, size as u32).to_image())
}

pub fn center_crop_mask(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let (r0, c0) = crop_origin(mask.height, mask.width, size)?;
    mask.window(c0, r0, size, size)
}

/// How long each inference takes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Latency {
    /// Simulated fixed duration in seconds, for reproducible runs.
    Fixed(f64),
    /// Wall-clock duration of each perception call.
    Measured,
}

/// One processed frame in an episode run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTiming {
    pub frame: usize,
    pub capture: f64,
    pub start: f64,
    pub end: f64,
    /// Frames dropped between the previous processed frame and this one.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EpisodeRun {
    pub events: Vec<WarningEvent>,
    pub timing: Vec<FrameTiming>,
}

impl EpisodeRun {
    /// Capture timestamp of the first deviating decision.
    pub fn first_warning(&self) -> Option<f64> {
        self.events.iter().find(|e| e.deviating).map(|e| e.timestamp)
    }
}

/// Frames captured this close after an inference completes count as already
/// available, absorbing rounding in accumulated timestamps.
pub const TIME_EPS: f64 = 1e-9;

/// Processes an episode one frame at a time. While an inference is in flight
/// newly captured frames wait in a single-slot buffer where the newest
/// overwrites older ones; when the inference completes the buffered frame,
/// if any, is processed next, otherwise the runner waits for the next
/// capture.
pub fn run_episode<F>(timestamps: &[f64], latency: Latency, policy: &DeviationPolicy, mut perceive: F) -> Result<EpisodeRun>
where
    F: FnMut(usize) -> Result<SceneObservation>,
{
    if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Episode("frame timestamps must be strictly increasing".into()));
    }
    let mut run = EpisodeRun::default();
    let mut next = 0;
    let mut clock = f64::NEG_INFINITY;
    let mut last = None;
    while next < timestamps.len() {
        let frame = next;
        let start = clock.max(timestamps[frame]);
        let (mut obs, k) = match latency {
            Latency::Fixed(k) => (perceive(frame)?, k),
            Latency::Measured => {
                let began = Instant::now();
                let obs = perceive(frame)?;
                (obs, began.elapsed().as_secs_f64())
            }
        };
        obs.timestamp = timestamps[frame];
        run.events.push(decide(&obs, policy));
        let end = start + k;
        run.timing.push(FrameTiming {
            frame,
            capture: timestamps[frame],
            start,
            end,
            skipped: last.map_or(frame, |l: usize| frame - l - 1),
        });
        last = Some(frame);
        clock = end;
        // Newest frame already captured when this inference completes.
        let ready = timestamps[frame + 1..].iter().take_while(|&&t| t <= end + TIME_EPS).count();
        next = frame + ready.max(1);
    }
    Ok(run)
}
