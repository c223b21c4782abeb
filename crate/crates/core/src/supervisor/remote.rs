use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::{decode_bbox, decode_keypoints, decode_strategy, decode_tool_calls};
use super::{Agent, AgentContext, AgentDecision, ProtocolError};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PixelKeypoint, SpatialConstraint, WorldPoint};
use crate::primitives::{GuidancePlan, KeypointMap};

/// What the run does when the remote agent fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Answer the failed call with the scripted oracle.
    Fallback,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_secs: f64,
    pub on_failure: FallbackPolicy,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { base_url: "http://127.0.0.1:8080".into(), timeout_secs: 30.0, on_failure: FallbackPolicy::Fallback }
    }
}

/// HTTP agent. Each capability is a POST of a JSON request to
/// `{base_url}/{decide_mode,perceive,bbox,waypoints}`; response bodies use
/// the wire formats in [`super::wire`].
pub struct RemoteAgent {
    cfg: RemoteConfig,
    http: ureq::Agent,
}

impl RemoteAgent {
    pub fn new(cfg: RemoteConfig) -> Self {
        let http = ureq::AgentBuilder::new().timeout(Duration::from_secs_f64(cfg.timeout_secs.max(0.001))).build();
        RemoteAgent { cfg, http }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn post(&self, path: &str, body: &Value) -> std::result::Result<String, ProtocolError> {
        let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path);
        let resp = self.http.post(&url).send_json(body.clone()).map_err(|e| match e {
            ureq::Error::Status(code, r) => {
                let text = r.into_string().unwrap_or_default();
                ProtocolError::Transport(format!("{url}: HTTP {code}: {text}"))
            }
            ureq::Error::Transport(t) => ProtocolError::Transport(format!("{url}: {t}")),
        })?;
        resp.into_string().map_err(|e| ProtocolError::Transport(format!("{url}: {e}")))
    }
}

fn base_request(ctx: &AgentContext<'_>) -> Value {
    json!({
        "task": ctx.env_cfg.task.description(),
        "subgoal": ctx.subgoal.id,
        "observation": ctx.obs,
    })
}

impl Agent for RemoteAgent {
    fn name(&self) -> &str {
        "remote"
    }

    fn decide_mode(&mut self, ctx: &AgentContext<'_>) -> Result<AgentDecision> {
        let raw = self.post("decide_mode", &base_request(ctx))?;
        Ok(decode_strategy(&raw)?)
    }

    fn perceive(&mut self, ctx: &AgentContext<'_>, camera: &CameraModel) -> Result<Vec<PixelKeypoint>> {
        let mut req = base_request(ctx);
        req["image_size"] = json!([camera.width, camera.height]);
        let raw = self.post("perceive", &req)?;
        let kps = decode_keypoints(&raw)?;
        if kps.is_empty() {
            return Err(Error::PerceptionEmpty);
        }
        Ok(kps)
    }

    fn gen_bbox(&mut self, ctx: &AgentContext<'_>, keypoints3d: &[WorldPoint]) -> Result<SpatialConstraint> {
        let ws = &ctx.profile.workspace;
        let mut req = base_request(ctx);
        req["keypoints"] = json!(keypoints3d.iter().map(|w| json!({"name": w.name, "xyz": [w.p.x, w.p.y, w.p.z]})).collect::<Vec<_>>());
        req["global_xyz_low"] = json!([ws.lo().x, ws.lo().y, ws.lo().z]);
        req["global_xyz_high"] = json!([ws.hi().x, ws.hi().y, ws.hi().z]);
        let raw = self.post("bbox", &req)?;
        Ok(decode_bbox(&raw, Some(ws))?.constraint)
    }

    fn gen_waypoints(&mut self, ctx: &AgentContext<'_>, keypoints: &KeypointMap) -> Result<GuidancePlan> {
        let mut req = base_request(ctx);
        let mut kps = serde_json::Map::new();
        for name in keypoints.names() {
            let p = keypoints.get(name).expect("listed name exists");
            kps.insert(name.to_string(), json!([p.x, p.y, p.z]));
        }
        req["keypoints"] = Value::Object(kps);
        let raw = self.post("waypoints", &req)?;
        Ok(decode_tool_calls(&raw)?)
    }
}
