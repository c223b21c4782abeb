//! JSON codecs for the agent payloads: keypoint arrays, strategy objects,
//! `bbox_3d` boxes and primitive tool-call lists.
//!
//! Decoders ignore unknown fields. Encoders emit compact JSON; the box
//! encoder prints every number in shortest round-trip form with integral
//! values written as integers, so canonical payloads re-encode byte for byte.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{AgentDecision, ProtocolError};
use crate::geometry::{PixelKeypoint, SpatialConstraint};
use crate::primitives::{GuidancePlan, PrimitiveCall, PRIMITIVE_NAMES};

type WireResult<T> = std::result::Result<T, ProtocolError>;

fn malformed(what: &'static str, reason: impl ToString, raw: &str) -> ProtocolError {
    ProtocolError::Malformed { what, reason: reason.to_string(), raw: raw.to_string() }
}

fn parse(what: &'static str, raw: &str) -> WireResult<Value> {
    serde_json::from_str(raw).map_err(|e| malformed(what, e, raw))
}

#[derive(Debug, Serialize, Deserialize)]
struct KeypointWire {
    name: String,
    point_2d: [f64; 2],
    confidence: f64,
    #[serde(default)]
    description: String,
}

#[derive(Serialize)]
struct KeypointOut<'a> {
    name: &'a str,
    point_2d: [u32; 2],
    confidence: f64,
    description: &'a str,
}

pub fn decode_keypoints(raw: &str) -> WireResult<Vec<PixelKeypoint>> {
    let items: Vec<KeypointWire> = serde_json::from_str(raw).map_err(|e| malformed("keypoints", e, raw))?;
    items
        .into_iter()
        .map(|k| {
            let [x, y] = k.point_2d;
            if !(0.0..=1000.0).contains(&x) || !(0.0..=1000.0).contains(&y) {
                return Err(malformed("keypoints", format!("`{}` point_2d outside [0, 1000]", k.name), raw));
            }
            if !(0.0..=1.0).contains(&k.confidence) {
                return Err(malformed("keypoints", format!("`{}` confidence outside [0, 1]", k.name), raw));
            }
            Ok(PixelKeypoint {
                name: k.name,
                u_norm: x.round() as u32,
                v_norm: y.round() as u32,
                confidence: k.confidence,
                description: k.description,
            })
        })
        .collect()
}

pub fn encode_keypoints(kps: &[PixelKeypoint]) -> String {
    let out: Vec<KeypointOut<'_>> = kps
        .iter()
        .map(|k| KeypointOut {
            name: &k.name,
            point_2d: [k.u_norm, k.v_norm],
            confidence: k.confidence,
            description: &k.description,
        })
        .collect();
    serde_json::to_string(&out).expect("keypoints serialise")
}

pub fn decode_strategy(raw: &str) -> WireResult<AgentDecision> {
    serde_json::from_str(raw).map_err(|e| malformed("strategy", e, raw))
}

pub fn encode_strategy(d: &AgentDecision) -> String {
    serde_json::to_string(d).expect("strategy serialises")
}

/// Decoded box payload.
#[derive(Debug, Clone, PartialEq)]
pub struct BboxPayload {
    pub constraint: SpatialConstraint,
    pub debug: Option<Value>,
}

/// Decodes `{"bbox_3d": [9 numbers], "debug": {...}}`. When `workspace` is
/// given the box must lie inside it.
pub fn decode_bbox(raw: &str, workspace: Option<&SpatialConstraint>) -> WireResult<BboxPayload> {
    let v = parse("bbox", raw)?;
    let arr = v
        .get("bbox_3d")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("bbox", "missing `bbox_3d` array", raw))?;
    let nums: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| malformed("bbox", "non-numeric bbox_3d entry", raw)))
        .collect::<WireResult<_>>()?;
    if nums.len() != 9 {
        return Err(malformed("bbox", format!("bbox_3d has {} entries, expected 9", nums.len()), raw));
    }
    let constraint = SpatialConstraint::from_bbox_3d(&nums)
        .map_err(|e| ProtocolError::InvalidBox { reason: e.to_string(), raw: raw.to_string() })?;
    if let Some(ws) = workspace {
        let (lo, hi, wlo, whi) = (constraint.lo(), constraint.hi(), ws.lo(), ws.hi());
        if (0..3).any(|i| lo[i] < wlo[i] - 1e-9 || hi[i] > whi[i] + 1e-9) {
            return Err(ProtocolError::InvalidBox { reason: "box leaves the workspace".into(), raw: raw.to_string() });
        }
    }
    Ok(BboxPayload { constraint, debug: v.get("debug").cloned() })
}

/// Shortest round-trip decimal; integral values print without a fraction.
fn fmt_number(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

pub fn encode_bbox(b: &SpatialConstraint, debug: Option<&Value>) -> String {
    let nums: Vec<String> = b.to_bbox_3d().iter().map(|&x| fmt_number(x)).collect();
    let mut s = format!("{{\"bbox_3d\":[{}]", nums.join(","));
    if let Some(d) = debug {
        s.push_str(",\"debug\":");
        s.push_str(&serde_json::to_string(d).expect("debug serialises"));
    }
    s.push('}');
    s
}

/// One call object: either a bare primitive (`{"name": ..}`) or a
/// function-call wrapper with `function.name` and `function.arguments`
/// (an object or a JSON string).
fn call_object(item: &Value, raw: &str) -> WireResult<Map<String, Value>> {
    let Some(obj) = item.as_object() else {
        return Err(malformed("tool_calls", "call is not an object", raw));
    };
    let Some(function) = obj.get("function") else {
        return Ok(obj.clone());
    };
    let name = function
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("tool_calls", "function without name", raw))?;
    let mut args = match function.get("arguments") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::String(s)) if s.trim().is_empty() => Map::new(),
        Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(malformed("tool_calls", format!("`{name}` arguments are not an object"), raw)),
            Err(e) => return Err(malformed("tool_calls", format!("`{name}` arguments: {e}"), raw)),
        },
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(malformed("tool_calls", format!("`{name}` arguments are not an object"), raw)),
    };
    args.insert("name".into(), Value::String(name.to_string()));
    Ok(args)
}

/// Accepts a plain array of calls, `{"tool_calls": [...]}`, or a chat
/// response `{"choices": [{"message": {"tool_calls": [...]}}]}`.
pub fn decode_tool_calls(raw: &str) -> WireResult<GuidancePlan> {
    let v = parse("tool_calls", raw)?;
    let list = match &v {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("tool_calls")
            .or_else(|| v.pointer("/choices/0/message/tool_calls"))
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("tool_calls", "no tool_calls array", raw))?,
        _ => return Err(malformed("tool_calls", "expected an array or object", raw)),
    };
    if list.is_empty() {
        return Err(ProtocolError::EmptyPlan { raw: raw.to_string() });
    }
    let mut calls = Vec::with_capacity(list.len());
    for item in list {
        let obj = call_object(item, raw)?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("tool_calls", "call without name", raw))?;
        if !PRIMITIVE_NAMES.contains(&name) {
            return Err(ProtocolError::UnknownPrimitive { name: name.to_string(), raw: raw.to_string() });
        }
        let call: PrimitiveCall =
            serde_json::from_value(Value::Object(obj.clone())).map_err(|e| malformed("tool_calls", format!("`{name}`: {e}"), raw))?;
        calls.push(call);
    }
    GuidancePlan::new(calls).map_err(|e| malformed("tool_calls", e, raw))
}

/// Plain array form: `[{"name": "lift", "height": 0.05, ...}, ...]`.
pub fn encode_primitive_list(plan: &GuidancePlan) -> String {
    serde_json::to_string(&plan.calls).expect("plan serialises")
}

#[derive(Serialize)]
struct FunctionOut {
    name: &'static str,
    arguments: String,
}

#[derive(Serialize)]
struct CallOut {
    id: String,
    #[serde(rename = "type")]
    kind: &'static str,
    function: FunctionOut,
}

/// Function-call form with string-encoded arguments and ids `call_<i>`.
/// Argument keys are sorted.
pub fn encode_tool_calls(plan: &GuidancePlan) -> String {
    let calls: Vec<CallOut> = plan
        .calls
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut args = match serde_json::to_value(c).expect("call serialises") {
                Value::Object(m) => m,
                _ => unreachable!("primitive calls serialise to objects"),
            };
            args.remove("name");
            CallOut {
                id: format!("call_{i}"),
                kind: "function",
                function: FunctionOut {
                    name: c.name(),
                    arguments: serde_json::to_string(&args).expect("arguments serialise"),
                },
            }
        })
        .collect();
    #[derive(Serialize)]
    struct Out {
        tool_calls: Vec<CallOut>,
    }
    serde_json::to_string(&Out { tool_calls: calls }).expect("tool calls serialise")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::Primitive;
    use crate::supervisor::InterventionMode;
    use crate::Vec3;

    #[test]
    fn strategy_example() {
        let d = decode_strategy(r#"{"strategy":"action_guidance","reasoning":"r"}"#).unwrap();
        assert_eq!(d.mode, InterventionMode::ActionGuidance);
        assert_eq!(d.reasoning, "r");
        assert!(decode_strategy(r#"{"strategy":"teleport","reasoning":"r"}"#).is_err());
    }

    #[test]
    fn bbox_example() {
        let p = decode_bbox(r#"{"bbox_3d":[0.5,0,0.2,0.02,0.01,0.05,0,0,0]}"#, None).unwrap();
        assert_eq!(p.constraint.center, Vec3::new(0.5, 0.0, 0.2));
        assert_eq!(p.constraint.size, Vec3::new(0.02, 0.01, 0.05));
        assert_eq!(encode_bbox(&p.constraint, None), r#"{"bbox_3d":[0.5,0,0.2,0.02,0.01,0.05,0,0,0]}"#);
    }

    #[test]
    fn bbox_negative_size() {
        let err = decode_bbox(r#"{"bbox_3d":[0.5,0,0.2,-0.01,0.01,0.05,0,0,0]}"#, None).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidBox { .. }));
    }

    #[test]
    fn bbox_outside_workspace() {
        let ws = SpatialConstraint::new(Vec3::zeros(), Vec3::repeat(0.2)).unwrap();
        let err = decode_bbox(r#"{"bbox_3d":[0.5,0,0.2,0.02,0.01,0.05,0,0,0]}"#, Some(&ws)).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidBox { .. }));
    }

    #[test]
    fn unknown_primitive_named() {
        let err = decode_tool_calls(r#"[{"name":"teleport","target":"hook"}]"#).unwrap_err();
        assert_eq!(err, ProtocolError::UnknownPrimitive { name: "teleport".into(), raw: r#"[{"name":"teleport","target":"hook"}]"#.into() });
    }

    #[test]
    fn empty_plan() {
        assert!(matches!(decode_tool_calls("[]"), Err(ProtocolError::EmptyPlan { .. })));
        assert!(matches!(decode_tool_calls(r#"{"tool_calls":[]}"#), Err(ProtocolError::EmptyPlan { .. })));
    }

    #[test]
    fn extra_fields_ignored() {
        let plan = decode_tool_calls(r#"[{"name":"grasp","force":3},{"name":"lift","height":0.05,"speed":"slow"}]"#).unwrap();
        assert_eq!(plan.calls[0].primitive, Primitive::Grasp);
        assert_eq!(plan.calls[1].primitive, Primitive::Lift { height: 0.05 });
    }

    #[test]
    fn tool_call_forms_agree() {
        let plan = GuidancePlan::new(vec![
            PrimitiveCall::new(Primitive::Lift { height: 0.05 }).with_analysis("up"),
            PrimitiveCall::new(Primitive::MoveDelta { from: "ring_kp".into(), to: "hook".into() }),
            PrimitiveCall::new(Primitive::Release),
        ])
        .unwrap();
        assert_eq!(decode_tool_calls(&encode_tool_calls(&plan)).unwrap(), plan);
        assert_eq!(decode_tool_calls(&encode_primitive_list(&plan)).unwrap(), plan);
    }

    #[test]
    fn keypoint_range_checked() {
        assert!(decode_keypoints(r#"[{"name":"a","point_2d":[1200,3],"confidence":0.5}]"#).is_err());
        assert!(decode_keypoints(r#"[{"name":"a","point_2d":[12,3],"confidence":1.5}]"#).is_err());
        let k = decode_keypoints(r#"[{"name":"a","point_2d":[12,3],"confidence":0.5,"extra":1}]"#).unwrap();
        assert_eq!((k[0].u_norm, k[0].v_norm), (12, 3));
    }
}
