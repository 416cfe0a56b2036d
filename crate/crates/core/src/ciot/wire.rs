//! Wire encodings for the ThingSpeak-compatible subset.
//!
//! ```text
//! POST /update                      api_key=<write_key>&field1=<v>...  -> "<entry_id>" | "0"
//! GET  /channels/{id}/feeds/last.json?api_key=<read_key>              -> entry | {"error":"empty"}
//! GET  /channels/{id}/feeds.json?api_key=<read_key>&results=N         -> {"channel":{..},"feeds":[..]}
//! GET  /channels/{id}/refined.json?api_key=<read_key>&window=N        -> moving averages
//! ```
//!
//! Entries render as `{"created_at":"YYYY-MM-DDThh:mm:ssZ","entry_id":N,"field1":"..."}`
//! with field values as JSON strings and absent slots omitted.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use super::{ChannelConfig, ChannelEntry, CiotError, FieldSet, FieldSlot, WriteOutcome};
use crate::time::Timestamp;

pub const EMPTY_BODY: &str = r#"{"error":"empty"}"#;
pub const NOT_FOUND_BODY: &str = r#"{"error":"not_found"}"#;
pub const AUTH_BODY: &str = r#"{"error":"auth"}"#;
/// Plain-text body for a rejected (rate-limited) write.
pub const REJECTED_BODY: &str = "0";

/// A rendered HTTP response, independent of the server framework.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl WireResponse {
    fn text(status: u16, body: impl Into<String>) -> Self {
        WireResponse {
            status,
            content_type: "text/plain; charset=utf-8",
            body: body.into(),
        }
    }

    fn json(status: u16, body: impl Into<String>) -> Self {
        WireResponse {
            status,
            content_type: "application/json; charset=utf-8",
            body: body.into(),
        }
    }
}

pub fn entry_to_value(entry: &ChannelEntry) -> Value {
    let mut m = Map::new();
    m.insert(
        "created_at".into(),
        Value::String(entry.created_at.to_wire()),
    );
    m.insert("entry_id".into(), Value::from(entry.entry_id));
    for (slot, v) in &entry.fields {
        m.insert(slot.key(), Value::String(v.clone()));
    }
    Value::Object(m)
}

pub fn entry_to_json(entry: &ChannelEntry) -> String {
    entry_to_value(entry).to_string()
}

pub fn entry_from_value(v: &Value) -> Result<ChannelEntry, CiotError> {
    let obj = v
        .as_object()
        .ok_or_else(|| CiotError::Protocol("entry is not a JSON object".into()))?;
    let entry_id = obj
        .get("entry_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| CiotError::Protocol("missing entry_id".into()))?;
    let created_at = obj
        .get("created_at")
        .and_then(Value::as_str)
        .and_then(Timestamp::parse_wire)
        .ok_or_else(|| CiotError::Protocol("missing or malformed created_at".into()))?;
    let mut fields = FieldSet::new();
    for (k, val) in obj {
        if let Some(slot) = FieldSlot::parse_key(k) {
            let slot = slot.map_err(|e| CiotError::Protocol(e.to_string()))?;
            match val {
                Value::String(s) => {
                    fields.insert(slot, s.clone());
                }
                // The hosted service emits null for empty slots.
                Value::Null => {}
                other => {
                    return Err(CiotError::Protocol(format!(
                        "{k} must be a string, got {other}"
                    )))
                }
            }
        }
    }
    Ok(ChannelEntry {
        entry_id,
        created_at,
        fields,
    })
}

pub fn entry_from_json(s: &str) -> Result<ChannelEntry, CiotError> {
    let v: Value =
        serde_json::from_str(s).map_err(|e| CiotError::Protocol(format!("invalid JSON: {e}")))?;
    entry_from_value(&v)
}

fn channel_echo(config: &ChannelConfig, last_entry_id: Option<u64>) -> Value {
    let mut m = Map::new();
    m.insert("id".into(), Value::from(config.channel_id));
    m.insert("name".into(), Value::String(config.name.clone()));
    for (slot, label) in &config.field_names {
        m.insert(slot.key(), Value::String(label.clone()));
    }
    m.insert(
        "last_entry_id".into(),
        last_entry_id.map(Value::from).unwrap_or(Value::Null),
    );
    Value::Object(m)
}

pub fn feed_to_json(
    config: &ChannelConfig,
    last_entry_id: Option<u64>,
    feeds: &[ChannelEntry],
) -> String {
    json!({
        "channel": channel_echo(config, last_entry_id),
        "feeds": feeds.iter().map(entry_to_value).collect::<Vec<_>>(),
    })
    .to_string()
}

pub fn feed_from_json(s: &str) -> Result<Vec<ChannelEntry>, CiotError> {
    let v: Value =
        serde_json::from_str(s).map_err(|e| CiotError::Protocol(format!("invalid JSON: {e}")))?;
    let feeds = v
        .get("feeds")
        .and_then(Value::as_array)
        .ok_or_else(|| CiotError::Protocol("missing feeds array".into()))?;
    feeds.iter().map(entry_from_value).collect()
}

/// Parsed `/update` request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateRequest {
    pub api_key: String,
    pub fields: FieldSet,
}

/// Parses the form-encoded `/update` body. Keys other than `api_key` and
/// `field<N>` are ignored; a malformed field key is a bad request. An
/// empty field set is left to the broker, which checks the key first.
pub fn parse_update_form(body: &str) -> Result<UpdateRequest, CiotError> {
    let pairs: Vec<(String, String)> = serde_urlencoded::from_str(body)
        .map_err(|e| CiotError::BadRequest(format!("malformed form body: {e}")))?;
    let mut api_key = None;
    let mut fields = FieldSet::new();
    for (k, v) in pairs {
        if k == "api_key" {
            api_key = Some(v);
        } else if let Some(slot) = FieldSlot::parse_key(&k) {
            fields.insert(slot?, v);
        }
    }
    let api_key = api_key.ok_or(CiotError::Auth)?;
    Ok(UpdateRequest { api_key, fields })
}

pub fn encode_update_form(api_key: &str, fields: &FieldSet) -> String {
    let mut pairs: Vec<(String, &str)> = vec![("api_key".to_string(), api_key)];
    pairs.extend(fields.iter().map(|(s, v)| (s.key(), v.as_str())));
    serde_urlencoded::to_string(pairs).expect("string pairs always encode")
}

pub fn update_response(result: &Result<WriteOutcome, CiotError>) -> WireResponse {
    match result {
        Ok(WriteOutcome::Accepted(id)) => WireResponse::text(200, id.to_string()),
        Ok(WriteOutcome::Rejected) => WireResponse::text(200, REJECTED_BODY),
        Err(e) => error_response(e, false),
    }
}

/// Interprets an `/update` response body.
pub fn parse_update_response(status: u16, body: &str) -> Result<WriteOutcome, CiotError> {
    match status {
        200 => match body.trim().parse::<u64>() {
            Ok(0) => Ok(WriteOutcome::Rejected),
            Ok(id) => Ok(WriteOutcome::Accepted(id)),
            Err(_) => Err(CiotError::Protocol(format!(
                "unexpected update body {body:?}"
            ))),
        },
        _ => Err(status_error(status, body, None)),
    }
}

pub fn last_response(result: &Result<Option<ChannelEntry>, CiotError>) -> WireResponse {
    match result {
        Ok(Some(entry)) => WireResponse::json(200, entry_to_json(entry)),
        Ok(None) => WireResponse::json(404, EMPTY_BODY),
        Err(e) => error_response(e, true),
    }
}

pub fn parse_last_response(
    status: u16,
    body: &str,
    channel_id: u64,
) -> Result<Option<ChannelEntry>, CiotError> {
    match status {
        200 => entry_from_json(body).map(Some),
        404 if is_empty_body(body) => Ok(None),
        _ => Err(status_error(status, body, Some(channel_id))),
    }
}

pub fn feed_response(
    result: &Result<(ChannelConfig, Option<u64>, Vec<ChannelEntry>), CiotError>,
) -> WireResponse {
    match result {
        Ok((cfg, last, feeds)) => WireResponse::json(200, feed_to_json(cfg, *last, feeds)),
        Err(e) => error_response(e, true),
    }
}

fn is_empty_body(body: &str) -> bool {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.get("error").and_then(Value::as_str).map(|s| s == "empty"))
        .unwrap_or(false)
}

pub fn error_response(e: &CiotError, json_body: bool) -> WireResponse {
    let (status, text, js) = match e {
        CiotError::Auth => (401, "error_auth", AUTH_BODY),
        CiotError::NotFound(_) => (404, "error_not_found", NOT_FOUND_BODY),
        CiotError::BadRequest(_) => (400, "error_bad_request", r#"{"error":"bad_request"}"#),
        _ => (500, "error_internal", r#"{"error":"internal"}"#),
    };
    if json_body {
        WireResponse::json(status, js)
    } else {
        WireResponse::text(status, text)
    }
}

pub fn status_error(status: u16, body: &str, channel_id: Option<u64>) -> CiotError {
    match status {
        401 | 403 => CiotError::Auth,
        404 => CiotError::NotFound(channel_id.unwrap_or(0)),
        400 => CiotError::BadRequest(body.to_string()),
        _ => CiotError::Protocol(format!("HTTP {status}: {body}")),
    }
}

pub fn refined_to_json(view: &super::RefinedView) -> String {
    let mut m = Map::new();
    m.insert("window".into(), Value::from(view.window));
    m.insert("skipped".into(), Value::from(view.skipped));
    for (slot, mean) in &view.means {
        m.insert(slot.key(), Value::from(*mean));
    }
    m.insert(
        "latest".into(),
        view.latest
            .as_ref()
            .map(entry_to_value)
            .unwrap_or(Value::Null),
    );
    Value::Object(m).to_string()
}

pub fn refined_from_json(s: &str) -> Result<super::RefinedView, CiotError> {
    let v: Value =
        serde_json::from_str(s).map_err(|e| CiotError::Protocol(format!("invalid JSON: {e}")))?;
    let window = v
        .get("window")
        .and_then(Value::as_u64)
        .ok_or_else(|| CiotError::Protocol("missing window".into()))? as usize;
    let skipped = v.get("skipped").and_then(Value::as_u64).unwrap_or(0) as usize;
    let mut means = BTreeMap::new();
    if let Some(obj) = v.as_object() {
        for (k, val) in obj {
            if let Some(slot) = FieldSlot::parse_key(k) {
                let slot = slot.map_err(|e| CiotError::Protocol(e.to_string()))?;
                let mean = val
                    .as_f64()
                    .ok_or_else(|| CiotError::Protocol(format!("{k} must be a number")))?;
                means.insert(slot, mean);
            }
        }
    }
    let latest = match v.get("latest") {
        None | Some(Value::Null) => None,
        Some(e) => Some(entry_from_value(e)?),
    };
    Ok(super::RefinedView {
        window,
        skipped,
        means,
        latest,
    })
}
