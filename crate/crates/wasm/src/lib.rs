//! JSON-in, JSON-out bindings behind the browser demo. Each exported
//! function has a plain Rust counterpart returning `Result<_, String>`.

use aerolite::data::{synth_episode, synth_scene, Drift, EpisodeParams, NestParams, SceneParams};
use aerolite::losses::{ciou_value, focal_scalar, FocalParams};
use aerolite::warning::{decide, run_episode, DeviationPolicy, Latency};
use aerolite::{BBox, Tensor};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Deserialize)]
#[serde(default)]
pub struct SceneRequest {
    pub size: usize,
    /// Nest center relative to the frame center, in pixels.
    pub offset: (f64, f64),
    pub nest_side: f64,
    pub rotation_deg: f64,
    pub qr: bool,
    pub illumination: f64,
    pub blur_radius: usize,
    pub noise: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for SceneRequest {
    fn default() -> Self {
        Self {
            size: 128,
            offset: (0.0, 0.0),
            nest_side: 32.0,
            rotation_deg: 0.0,
            qr: true,
            illumination: 1.0,
            blur_radius: 0,
            noise: 0.02,
            delta: 0.5,
            seed: 0,
        }
    }
}

impl SceneRequest {
    fn params(&self) -> SceneParams {
        let mut p = SceneParams::centered(self.size, self.seed);
        let s = self.size as f64;
        let (cx, cy) = (s / 2.0 + self.offset.0, s / 2.0 + self.offset.1);
        p.house = Some([1.0, 1.0, s - 2.0, s - 2.0]);
        p.nest = Some(NestParams { center: (cx, cy), size: (self.nest_side, self.nest_side), rotation_deg: self.rotation_deg });
        p.qr = if self.qr {
            p.qr.map(|mut q| {
                let reach = self.nest_side * std::f64::consts::SQRT_2 / 2.0 + q.side;
                q.center = (cx + if cx < s / 2.0 { reach } else { -reach }, cy);
                q
            })
        } else {
            None
        };
        p.illumination = self.illumination;
        p.blur_radius = self.blur_radius;
        p.noise = self.noise;
        p
    }
}

#[derive(Serialize)]
pub struct SceneObject {
    pub class: &'static str,
    pub bbox: [f64; 4],
}

#[derive(Serialize)]
pub struct SceneDecision {
    pub deviating: bool,
    pub reason: Option<&'static str>,
    pub d: Option<f64>,
    pub l: Option<f64>,
    pub ratio: Option<f64>,
    pub center: (f64, f64),
    pub target: Option<(f64, f64)>,
    pub objects: Vec<SceneObject>,
}

/// Renders the requested scene as RGBA bytes, row-major.
pub fn scene_rgba(request: &str) -> Result<Vec<u8>, String> {
    let req: SceneRequest = serde_json::from_str(request).map_err(err)?;
    let sample = synth_scene(&req.params()).map_err(err)?;
    Ok(sample.image.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect())
}

/// Landing decision for the scene under ground-truth perception.
pub fn scene_decision(request: &str) -> Result<SceneDecision, String> {
    let req: SceneRequest = serde_json::from_str(request).map_err(err)?;
    let sample = synth_scene(&req.params()).map_err(err)?;
    let obs = sample.oracle_observation(0.0);
    let event = decide(&obs, &DeviationPolicy::new(req.delta).map_err(err)?);
    let target = sample
        .instances
        .iter()
        .find(|i| i.class == aerolite::Class::Nest)
        .and_then(|i| i.mask.centroid());
    Ok(SceneDecision {
        deviating: event.deviating,
        reason: event.reason.map(|r| r.as_str()),
        d: event.d,
        l: event.l,
        ratio: event.d.zip(event.l).map(|(d, l)| d / l),
        center: obs.center,
        target,
        objects: sample
            .instances
            .iter()
            .map(|i| SceneObject { class: i.class.name(), bbox: [i.bbox.x1, i.bbox.y1, i.bbox.x2, i.bbox.y2] })
            .collect(),
    })
}

#[derive(Deserialize)]
#[serde(default)]
pub struct EpisodeRequest {
    pub frames: usize,
    pub frame_interval: f64,
    pub delta: f64,
    /// Simulated inference time per processed frame, in seconds.
    pub latency: f64,
    pub drift: Drift,
    pub nest_side: (f64, f64),
    pub seed: u64,
}

impl Default for EpisodeRequest {
    fn default() -> Self {
        Self {
            frames: 50,
            frame_interval: 0.1,
            delta: 0.5,
            latency: 0.0,
            drift: Drift::Ramp { start: 1.0, velocity: (6.0, 0.0) },
            nest_side: (20.0, 32.0),
            seed: 0,
        }
    }
}

#[derive(Serialize)]
pub struct FrameReport {
    pub t: f64,
    /// Ground-truth flag of the frame.
    pub deviating: bool,
    pub processed: bool,
    /// The engine's decision, for processed frames.
    pub warned: Option<bool>,
    pub d_over_l: Option<f64>,
}

#[derive(Serialize)]
pub struct EpisodeReport {
    pub onset: Option<f64>,
    pub warning: Option<f64>,
    pub delay: Option<f64>,
    pub processed: usize,
    pub frames: Vec<FrameReport>,
}

/// Replays a scripted episode with a fixed inference latency, showing which
/// frames are skipped and when the first warning fires.
pub fn episode_simulation(request: &str) -> Result<EpisodeReport, String> {
    let req: EpisodeRequest = serde_json::from_str(request).map_err(err)?;
    if req.frames == 0 || req.frames > 2000 {
        return Err(format!("frame count {} outside 1..=2000", req.frames));
    }
    if !(req.latency >= 0.0 && req.latency.is_finite()) {
        return Err(format!("latency must be non-negative, got {}", req.latency));
    }
    let params = EpisodeParams {
        id: "demo".into(),
        frames: req.frames,
        frame_interval: req.frame_interval,
        delta: req.delta,
        size: 128,
        nest_side: req.nest_side,
        drift: req.drift,
        seed: req.seed,
    };
    let episode = synth_episode(&params).map_err(err)?;
    let policy = DeviationPolicy::new(req.delta).map_err(err)?;
    let run = run_episode(&episode.timestamps(), Latency::Fixed(req.latency), &policy, |i| {
        Ok(episode.render(i)?.oracle_observation(0.0))
    })
    .map_err(err)?;
    let mut frames: Vec<FrameReport> = episode
        .frames
        .iter()
        .map(|f| FrameReport { t: f.timestamp, deviating: f.deviating, processed: false, warned: None, d_over_l: None })
        .collect();
    for (timing, event) in run.timing.iter().zip(&run.events) {
        let f = &mut frames[timing.frame];
        f.processed = true;
        f.warned = Some(event.deviating);
        f.d_over_l = event.d.zip(event.l).map(|(d, l)| d / l);
    }
    let onset = episode.onset();
    let warning = run.first_warning();
    Ok(EpisodeReport {
        onset,
        warning,
        delay: onset.zip(warning).map(|(o, w)| (o - w).abs()),
        processed: run.timing.len(),
        frames,
    })
}

#[derive(Deserialize)]
#[serde(default)]
pub struct LossRequest {
    /// `(cx, cy, w, h)`.
    pub pred: [f64; 4],
    pub gt: [f64; 4],
    pub logit: f64,
    pub target: bool,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossRequest {
    fn default() -> Self {
        Self { pred: [50.0, 50.0, 30.0, 20.0], gt: [55.0, 52.0, 28.0, 24.0], logit: 0.0, target: true, alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Serialize)]
pub struct LossReport {
    pub iou: f64,
    pub ciou: f64,
    pub ciou_loss: f64,
    pub probability: f64,
    pub focal: f64,
    pub cross_entropy: f64,
}

/// Box regression and classification terms for one prediction.
pub fn loss_terms(request: &str) -> Result<LossReport, String> {
    let req: LossRequest = serde_json::from_str(request).map_err(err)?;
    let focal = FocalParams { alpha: req.alpha, gamma: req.gamma };
    focal.validate().map_err(err)?;
    if req.pred[2] <= 0.0 || req.pred[3] <= 0.0 || req.gt[2] <= 0.0 || req.gt[3] <= 0.0 {
        return Err("box sizes must be positive".into());
    }
    let b = |v: [f64; 4]| BBox::from_cxcywh(v[0], v[1], v[2], v[3]);
    let ciou = ciou_value(req.pred, req.gt);
    let p = Tensor::scalar(req.logit).sigmoid().item();
    Ok(LossReport {
        iou: b(req.pred).iou(&b(req.gt)),
        ciou,
        ciou_loss: 1.0 - ciou,
        probability: p,
        focal: focal_scalar(p, req.target, focal),
        cross_entropy: focal_scalar(p, req.target, FocalParams { alpha: 1.0, gamma: 0.0 }),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene(request: &str) -> Result<Vec<u8>, JsError> {
    scene_rgba(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = decideScene)]
pub fn decide_scene(request: &str) -> Result<String, JsError> {
    to_js(scene_decision(request))
}

#[wasm_bindgen(js_name = simulateEpisode)]
pub fn simulate_episode(request: &str) -> Result<String, JsError> {
    to_js(episode_simulation(request))
}

#[wasm_bindgen(js_name = exploreLoss)]
pub fn explore_loss(request: &str) -> Result<String, JsError> {
    to_js(loss_terms(request))
}
