//! JSON-RPC 2.0 plumbing: error codes, envelope builders, and line parsing.
//!
//! Framing is newline-delimited: one JSON object per line, responses written
//! in arrival order. A frame without an `id` member is a notification and
//! never gets a response, not even for errors.

use serde_json::{json, Value};

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const INTERNAL_ERROR: i64 = -32603;
/// MCP-defined: resources/read against an unknown URI.
pub const RESOURCE_NOT_FOUND: i64 = -32002;

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    /// Echoed verbatim in the response; `None` marks a notification.
    pub id: Option<Value>,
    pub method: String,
    pub params: Value,
}

/// How one input line should be answered before method dispatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Call(Request),
    /// Invalid but answerable (malformed JSON, non-object, missing method).
    Broken(Value),
    /// Nothing to send back (notification, malformed or not).
    Silent,
}

pub fn success(id: Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

pub fn error(id: Value, code: i64, message: impl AsRef<str>) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "error": {"code": code, "message": message.as_ref()}})
}

pub fn parse_line(line: &str) -> Frame {
    let value: Value = match serde_json::from_str(line) {
        Ok(value) => value,
        Err(_) => return Frame::Broken(error(Value::Null, PARSE_ERROR, "parse error")),
    };
    let Value::Object(object) = value else {
        return Frame::Broken(error(Value::Null, INVALID_REQUEST, "request must be an object"));
    };
    let id = object.get("id").cloned();
    let method = match object.get("method").and_then(Value::as_str) {
        Some(method) => method.to_string(),
        None => {
            return match id {
                Some(id) => Frame::Broken(error(id, INVALID_REQUEST, "method must be a string")),
                None => Frame::Silent,
            };
        }
    };
    let params = object.get("params").cloned().unwrap_or(Value::Null);
    Frame::Call(Request { id, method, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_calls_parse() {
        let frame = parse_line(r#"{"jsonrpc":"2.0","id":7,"method":"tools/list"}"#);
        assert_eq!(
            frame,
            Frame::Call(Request {
                id: Some(json!(7)),
                method: "tools/list".into(),
                params: Value::Null
            })
        );
    }

    #[test]
    fn notifications_have_no_id() {
        let frame =
            parse_line(r#"{"jsonrpc":"2.0","method":"notifications/initialized","params":{}}"#);
        let Frame::Call(request) = frame else { panic!("notification should parse") };
        assert_eq!(request.id, None);
    }

    #[test]
    fn garbage_maps_to_parse_error_with_null_id() {
        let Frame::Broken(response) = parse_line("{ not json") else {
            panic!("garbage must be answerable")
        };
        assert_eq!(response["error"]["code"], json!(PARSE_ERROR));
        assert_eq!(response["id"], Value::Null);
    }

    #[test]
    fn non_object_and_missing_method_are_invalid_requests() {
        let Frame::Broken(response) = parse_line("[1,2,3]") else { panic!() };
        assert_eq!(response["error"]["code"], json!(INVALID_REQUEST));

        let Frame::Broken(response) = parse_line(r#"{"id":3,"params":{}}"#) else { panic!() };
        assert_eq!(response["error"]["code"], json!(INVALID_REQUEST));
        assert_eq!(response["id"], json!(3));

        // No method and no id: nothing can usefully be answered.
        assert_eq!(parse_line(r#"{"params":{}}"#), Frame::Silent);
    }
}
