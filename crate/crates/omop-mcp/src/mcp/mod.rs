//! MCP server: exposes the vocabulary gateway to model hosts over JSON-RPC.
//!
//! The transport is newline-delimited JSON-RPC 2.0 on arbitrary
//! reader/writer pairs (stdio in production, byte buffers in tests). The
//! server is stateless between requests: every call is answered from the
//! shared [`VocabularyStore`] and the registered resources, so two sessions
//! over fresh transports behave identically.
//!
//! Error mapping follows the protocol split between request problems and
//! tool problems. Frames that are not valid calls get JSON-RPC errors
//! (`-32700` parse, `-32600` invalid request, `-32601` unknown method,
//! `-32602` bad params or unknown tool, `-32002` unknown resource).
//! Failures while *executing* a well-formed tool call (invalid query,
//! unknown concept id, upstream trouble) come back as a successful response
//! whose result carries `isError: true`, so the model sees the message and
//! can react to it.

pub mod jsonrpc;
pub mod resources;

use std::io::{BufRead, Write};

use serde_json::{json, Map, Value};

use crate::athena::{GatewayError, SearchFilters, VocabularyStore, MAX_PAGE_SIZE};
use jsonrpc::{Frame, Request};
pub use resources::{domain_for_table, register_default_resources, ResourceDescriptor};

pub const PROTOCOL_VERSION: &str = "2025-06-18";
pub const SERVER_NAME: &str = "omop-mcp";

/// Input schema for `search_athena`, shared between the MCP tool listing
/// and the chat-completions function descriptors so the two cannot drift.
pub fn search_athena_input_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "keyword": {
                "type": "string",
                "description": "Search phrase, typically a concise clinical keyword."
            },
            "domain": {
                "type": "string",
                "description": "Restrict results to one OMOP domain, e.g. Condition."
            },
            "vocabulary": {
                "type": ["string", "array"],
                "items": {"type": "string"},
                "description": "Restrict results to one or more vocabularies, e.g. SNOMED."
            },
            "standard_only": {
                "type": "boolean",
                "description": "Return only standard concepts."
            },
            "page": {"type": "integer", "minimum": 1},
            "page_size": {"type": "integer", "minimum": 1, "maximum": MAX_PAGE_SIZE}
        },
        "required": ["keyword"]
    })
}

/// Input schema for `get_concept_details`, shared like
/// [`search_athena_input_schema`].
pub fn get_concept_details_input_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "concept_id": {
                "type": "integer",
                "description": "OMOP concept id, a positive integer."
            }
        },
        "required": ["concept_id"]
    })
}

fn tool_descriptors() -> Vec<Value> {
    vec![
        json!({
            "name": "search_athena",
            "description": "Search OMOP vocabulary concepts by keyword, with optional \
                            domain, vocabulary, standard-only, and paging filters.",
            "inputSchema": search_athena_input_schema(),
        }),
        json!({
            "name": "get_concept_details",
            "description": "Fetch one OMOP concept by its concept id.",
            "inputSchema": get_concept_details_input_schema(),
        }),
    ]
}

pub struct Server<'a> {
    store: &'a VocabularyStore,
    resources: Vec<ResourceDescriptor>,
}

impl<'a> Server<'a> {
    pub fn new(store: &'a VocabularyStore) -> Self {
        Self::with_resources(store, register_default_resources())
    }

    pub fn with_resources(store: &'a VocabularyStore, resources: Vec<ResourceDescriptor>) -> Self {
        Server { store, resources }
    }

    /// Reads frames until EOF, answering each non-notification in arrival
    /// order. Returns only on EOF or a transport-level I/O failure.
    pub fn serve<R: BufRead, W: Write>(&self, reader: R, mut writer: W) -> std::io::Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(response) = self.handle_line(&line) {
                serde_json::to_writer(&mut writer, &response)?;
                writer.write_all(b"\n")?;
                writer.flush()?;
            }
        }
        Ok(())
    }

    /// Answers one frame; `None` means the frame was a notification.
    pub fn handle_line(&self, line: &str) -> Option<Value> {
        match jsonrpc::parse_line(line) {
            Frame::Broken(response) => Some(response),
            Frame::Silent => None,
            Frame::Call(request) => {
                // Notifications are never answered; all methods here are
                // read-only, so there is nothing to execute either.
                let id = request.id.clone()?;
                Some(self.dispatch(id, &request))
            }
        }
    }

    fn dispatch(&self, id: Value, request: &Request) -> Value {
        match request.method.as_str() {
            "initialize" => jsonrpc::success(
                id,
                json!({
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {"tools": {}, "resources": {}},
                    "serverInfo": {
                        "name": SERVER_NAME,
                        "version": env!("CARGO_PKG_VERSION"),
                    },
                }),
            ),
            "ping" => jsonrpc::success(id, json!({})),
            "tools/list" => jsonrpc::success(id, json!({"tools": tool_descriptors()})),
            "tools/call" => self.handle_tool_call(id, &request.params),
            "resources/list" => {
                let listed: Vec<Value> = self
                    .resources
                    .iter()
                    .map(|r| json!({"uri": r.uri, "name": r.name, "mimeType": r.mime_type}))
                    .collect();
                jsonrpc::success(id, json!({"resources": listed}))
            }
            "resources/read" => self.handle_resource_read(id, &request.params),
            other => {
                jsonrpc::error(id, jsonrpc::METHOD_NOT_FOUND, format!("method not found: {other}"))
            }
        }
    }

    fn handle_tool_call(&self, id: Value, params: &Value) -> Value {
        let Some(name) = params.get("name").and_then(Value::as_str) else {
            return jsonrpc::error(id, jsonrpc::INVALID_PARAMS, "tools/call requires a tool name");
        };
        let empty = Map::new();
        let arguments = match params.get("arguments") {
            None | Some(Value::Null) => &empty,
            Some(Value::Object(map)) => map,
            Some(_) => {
                return jsonrpc::error(id, jsonrpc::INVALID_PARAMS, "arguments must be an object");
            }
        };
        match name {
            "search_athena" => match parse_search_arguments(arguments) {
                Ok((keyword, filters)) => match self.store.search_concepts(&keyword, &filters) {
                    Ok(candidates) => {
                        let text = serde_json::to_string(&candidates)
                            .expect("candidate sets serialize infallibly");
                        jsonrpc::success(id, tool_result(text, false))
                    }
                    Err(error) => jsonrpc::success(id, tool_failure(&error)),
                },
                Err(message) => jsonrpc::error(id, jsonrpc::INVALID_PARAMS, message),
            },
            "get_concept_details" => {
                let Some(concept_id) = arguments.get("concept_id").and_then(Value::as_i64) else {
                    return jsonrpc::error(
                        id,
                        jsonrpc::INVALID_PARAMS,
                        "concept_id must be an integer",
                    );
                };
                match self.store.get_concept(concept_id) {
                    Ok(Some(concept)) => {
                        let text =
                            serde_json::to_string(&concept).expect("concepts serialize infallibly");
                        jsonrpc::success(id, tool_result(text, false))
                    }
                    Ok(None) | Err(GatewayError::InvalidId(_)) => jsonrpc::success(
                        id,
                        tool_result(
                            json!({"error": format!("no concept with id {concept_id}")})
                                .to_string(),
                            true,
                        ),
                    ),
                    Err(error) => jsonrpc::success(id, tool_failure(&error)),
                }
            }
            unknown => {
                jsonrpc::error(id, jsonrpc::INVALID_PARAMS, format!("unknown tool: {unknown}"))
            }
        }
    }

    fn handle_resource_read(&self, id: Value, params: &Value) -> Value {
        let Some(uri) = params.get("uri").and_then(Value::as_str) else {
            return jsonrpc::error(id, jsonrpc::INVALID_PARAMS, "resources/read requires a uri");
        };
        match self.resources.iter().find(|r| r.uri == uri) {
            Some(resource) => jsonrpc::success(
                id,
                json!({
                    "contents": [{
                        "uri": resource.uri,
                        "mimeType": resource.mime_type,
                        "text": resource.content,
                    }]
                }),
            ),
            None => jsonrpc::error(
                id,
                jsonrpc::RESOURCE_NOT_FOUND,
                format!("resource not found: {uri}"),
            ),
        }
    }
}

/// Tool output envelope: a single text content block holding compact JSON.
fn tool_result(text: String, is_error: bool) -> Value {
    json!({
        "content": [{"type": "text", "text": text}],
        "isError": is_error,
    })
}

fn tool_failure(error: &GatewayError) -> Value {
    tool_result(json!({"error": error.to_string()}).to_string(), true)
}

/// Splits tool arguments into the keyword and [`SearchFilters`]. Type-shape
/// violations are `Err` (the caller maps them to `-32602`); values that are
/// well-typed but out of range are left for gateway validation, which
/// reports them as tool execution errors instead.
fn parse_search_arguments(
    arguments: &Map<String, Value>,
) -> Result<(String, SearchFilters), String> {
    let keyword = match arguments.get("keyword") {
        Some(Value::String(keyword)) => keyword.clone(),
        _ => return Err("keyword must be a string".into()),
    };
    let mut filters = SearchFilters::default();
    match arguments.get("domain") {
        None | Some(Value::Null) => {}
        Some(Value::String(domain)) => filters.domain = Some(domain.clone()),
        Some(_) => return Err("domain must be a string".into()),
    }
    match arguments.get("vocabulary") {
        None | Some(Value::Null) => {}
        Some(Value::String(one)) => filters.vocabulary = Some(vec![one.clone()]),
        Some(Value::Array(items)) => {
            let mut names = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    Value::String(name) => names.push(name.clone()),
                    _ => return Err("vocabulary entries must be strings".into()),
                }
            }
            filters.vocabulary = Some(names);
        }
        Some(_) => return Err("vocabulary must be a string or an array of strings".into()),
    }
    match arguments.get("standard_only") {
        None | Some(Value::Null) => {}
        Some(Value::Bool(flag)) => filters.standard_only = *flag,
        Some(_) => return Err("standard_only must be a boolean".into()),
    }
    match arguments.get("page") {
        None | Some(Value::Null) => {}
        Some(value) => filters.page = clamp_page(value, "page")?,
    }
    match arguments.get("page_size") {
        None | Some(Value::Null) => {}
        Some(value) => filters.page_size = clamp_page(value, "page_size")?,
    }
    Ok((keyword, filters))
}

fn clamp_page(value: &Value, field: &str) -> Result<u32, String> {
    value
        .as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| format!("{field} must be a non-negative integer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::athena::FixtureIndex;
    use crate::vocabulary::{CandidateSet, Concept, ConceptId, StandardKind, Validity};
    use proptest::prelude::*;
    use std::io::Cursor;

    fn concept(id: i64, name: &str) -> Concept {
        Concept {
            concept_id: ConceptId::new(id).unwrap(),
            concept_name: name.to_string(),
            domain_id: "Condition".to_string(),
            vocabulary_id: "SNOMED".to_string(),
            concept_class: "Clinical Finding".to_string(),
            standard: StandardKind::Standard,
            validity: Validity::Valid,
        }
    }

    fn figure_store() -> VocabularyStore {
        VocabularyStore::fixture(
            FixtureIndex::from_concepts(vec![
                concept(77670, "Chest pain"),
                concept(4153877, "Chest pain on breathing"),
                concept(320136, "Pain"),
            ])
            .unwrap(),
        )
    }

    /// Runs one session over in-memory transports and parses every
    /// response line.
    fn run_session(server: &Server, lines: &[Value]) -> Vec<Value> {
        let input = lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n") + "\n";
        let mut output = Vec::new();
        server.serve(Cursor::new(input), &mut output).unwrap();
        String::from_utf8(output)
            .unwrap()
            .lines()
            .map(|line| serde_json::from_str(line).unwrap())
            .collect()
    }

    fn call(id: i64, name: &str, arguments: Value) -> Value {
        json!({
            "jsonrpc": "2.0",
            "id": id,
            "method": "tools/call",
            "params": {"name": name, "arguments": arguments},
        })
    }

    fn tool_text(response: &Value) -> &str {
        response["result"]["content"][0]["text"].as_str().unwrap()
    }

    #[test]
    fn initialize_reports_identity_and_capabilities() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[json!({"jsonrpc": "2.0", "id": 0, "method": "initialize", "params": {
                "protocolVersion": "2025-06-18",
                "capabilities": {},
                "clientInfo": {"name": "test-host", "version": "0.0.0"},
            }})],
        );
        let result = &responses[0]["result"];
        assert_eq!(result["protocolVersion"], json!(PROTOCOL_VERSION));
        assert_eq!(result["serverInfo"]["name"], json!(SERVER_NAME));
        assert_eq!(result["serverInfo"]["version"], json!(env!("CARGO_PKG_VERSION")));
        assert!(result["capabilities"]["tools"].is_object());
        assert!(result["capabilities"]["resources"].is_object());
    }

    #[test]
    fn tools_list_names_both_tools_with_schemas() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses =
            run_session(&server, &[json!({"jsonrpc": "2.0", "id": 1, "method": "tools/list"})]);
        let tools = responses[0]["result"]["tools"].as_array().unwrap();
        let names: Vec<&str> = tools.iter().map(|t| t["name"].as_str().unwrap()).collect();
        assert_eq!(names, vec!["search_athena", "get_concept_details"]);
        for tool in tools {
            assert_eq!(tool["inputSchema"]["type"], json!("object"));
            assert!(tool["inputSchema"]["required"].is_array());
            assert!(!tool["description"].as_str().unwrap().is_empty());
        }
    }

    #[test]
    fn chest_pain_search_returns_text_block_naming_the_concept() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses =
            run_session(&server, &[call(2, "search_athena", json!({"keyword": "chest pain"}))]);
        let result = &responses[0]["result"];
        assert_eq!(result["isError"], json!(false));
        assert_eq!(result["content"].as_array().unwrap().len(), 1);
        assert_eq!(result["content"][0]["type"], json!("text"));
        let text = tool_text(&responses[0]);
        assert!(text.contains("77670"), "expected concept id in {text}");
        assert!(text.contains("Chest pain"), "expected concept name in {text}");
    }

    #[test]
    fn tool_call_matches_direct_store_search() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[call(3, "search_athena", json!({"keyword": "chest pain", "page_size": 5}))],
        );
        let via_tool: CandidateSet = serde_json::from_str(tool_text(&responses[0])).unwrap();
        let filters = SearchFilters { page_size: 5, ..SearchFilters::default() };
        let direct = store.search_concepts("chest pain", &filters).unwrap();
        assert_eq!(via_tool, direct);
    }

    #[test]
    fn filters_pass_through_to_the_store() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[
                call(
                    4,
                    "search_athena",
                    json!({"keyword": "pain", "vocabulary": "ICD10CM", "standard_only": true}),
                ),
                call(
                    5,
                    "search_athena",
                    json!({"keyword": "pain", "vocabulary": ["SNOMED", "LOINC"]}),
                ),
            ],
        );
        let none: CandidateSet = serde_json::from_str(tool_text(&responses[0])).unwrap();
        assert!(none.candidates.is_empty(), "no fixture concept is ICD10CM");
        let snomed: CandidateSet = serde_json::from_str(tool_text(&responses[1])).unwrap();
        assert!(!snomed.candidates.is_empty());
    }

    #[test]
    fn concept_details_round_trip_and_miss() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[
                call(6, "get_concept_details", json!({"concept_id": 77670})),
                call(7, "get_concept_details", json!({"concept_id": 999999})),
            ],
        );
        let found: Concept = serde_json::from_str(tool_text(&responses[0])).unwrap();
        assert_eq!(found.concept_name, "Chest pain");
        assert_eq!(responses[0]["result"]["isError"], json!(false));
        assert_eq!(responses[1]["result"]["isError"], json!(true));
        assert!(tool_text(&responses[1]).contains("999999"));
    }

    #[test]
    fn execution_failures_use_is_error_not_protocol_errors() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[
                call(8, "search_athena", json!({"keyword": "   "})),
                call(9, "search_athena", json!({"keyword": "pain", "page_size": 0})),
                call(10, "get_concept_details", json!({"concept_id": -4})),
            ],
        );
        for response in &responses {
            assert!(response.get("error").is_none(), "expected tool-level error: {response}");
            assert_eq!(response["result"]["isError"], json!(true));
        }
        assert!(tool_text(&responses[1]).contains("page_size"));
    }

    #[test]
    fn type_shape_violations_are_invalid_params() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[
                call(11, "search_athena", json!({})),
                call(12, "search_athena", json!({"keyword": 7})),
                call(13, "search_athena", json!({"keyword": "pain", "page_size": "big"})),
                call(14, "search_athena", json!({"keyword": "pain", "vocabulary": [1]})),
                call(15, "get_concept_details", json!({})),
                call(16, "made_up_tool", json!({})),
                json!({"jsonrpc": "2.0", "id": 17, "method": "tools/call", "params": {}}),
            ],
        );
        for response in &responses {
            assert_eq!(
                response["error"]["code"],
                json!(jsonrpc::INVALID_PARAMS),
                "expected -32602: {response}"
            );
        }
    }

    #[test]
    fn protocol_error_codes_cover_the_failure_modes() {
        let store = figure_store();
        let server = Server::new(&store);
        let mut output = Vec::new();
        let input = concat!(
            "{\"jsonrpc\":\"2.0\",\"id\":1,\"method\":\"no/such/method\"}\n",
            "{ this is not json\n",
            "[1,2,3]\n",
            "{\"jsonrpc\":\"2.0\",\"id\":4,\"params\":{}}\n",
        );
        server.serve(Cursor::new(input), &mut output).unwrap();
        let responses: Vec<Value> = String::from_utf8(output)
            .unwrap()
            .lines()
            .map(|line| serde_json::from_str(line).unwrap())
            .collect();
        assert_eq!(responses[0]["error"]["code"], json!(jsonrpc::METHOD_NOT_FOUND));
        assert_eq!(responses[1]["error"]["code"], json!(jsonrpc::PARSE_ERROR));
        assert_eq!(responses[1]["id"], Value::Null);
        assert_eq!(responses[2]["error"]["code"], json!(jsonrpc::INVALID_REQUEST));
        assert_eq!(responses[3]["error"]["code"], json!(jsonrpc::INVALID_REQUEST));
        assert_eq!(responses[3]["id"], json!(4));
    }

    #[test]
    fn notifications_produce_no_response() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[
                json!({"jsonrpc": "2.0", "method": "notifications/initialized"}),
                json!({"jsonrpc": "2.0", "method": "tools/list"}),
                json!({"jsonrpc": "2.0", "id": 42, "method": "ping"}),
            ],
        );
        assert_eq!(responses.len(), 1);
        assert_eq!(responses[0]["id"], json!(42));
    }

    #[test]
    fn resources_list_and_read() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[
                json!({"jsonrpc": "2.0", "id": 1, "method": "resources/list"}),
                json!({"jsonrpc": "2.0", "id": 2, "method": "resources/read",
                       "params": {"uri": "omop://vocabulary-preferences"}}),
                json!({"jsonrpc": "2.0", "id": 3, "method": "resources/read",
                       "params": {"uri": "omop://missing"}}),
            ],
        );
        let listed = responses[0]["result"]["resources"].as_array().unwrap();
        assert_eq!(listed.len(), 3);
        for entry in listed {
            assert!(entry["uri"].as_str().unwrap().starts_with("omop://"));
            assert!(entry["mimeType"].is_string());
        }
        let contents = &responses[1]["result"]["contents"][0];
        assert_eq!(contents["uri"], json!("omop://vocabulary-preferences"));
        let text = contents["text"].as_str().unwrap();
        assert!(text.contains("SNOMED") && text.contains("LOINC"));
        assert_eq!(responses[2]["error"]["code"], json!(jsonrpc::RESOURCE_NOT_FOUND));
        assert!(responses[2]["error"]["message"].as_str().unwrap().contains("omop://missing"));
    }

    #[test]
    fn responses_come_back_in_request_order() {
        let store = figure_store();
        let server = Server::new(&store);
        let responses = run_session(
            &server,
            &[
                json!({"jsonrpc": "2.0", "id": 9, "method": "tools/list"}),
                json!({"jsonrpc": "2.0", "id": 1, "method": "resources/list"}),
                json!({"jsonrpc": "2.0", "id": "last", "method": "ping"}),
            ],
        );
        let ids: Vec<&Value> = responses.iter().map(|r| &r["id"]).collect();
        assert_eq!(ids, vec![&json!(9), &json!(1), &json!("last")]);
    }

    #[test]
    fn successive_sessions_are_isolated_and_identical() {
        let store = figure_store();
        let server = Server::new(&store);
        let script = [
            json!({"jsonrpc": "2.0", "id": 1, "method": "initialize", "params": {}}),
            call(2, "search_athena", json!({"keyword": "chest pain"})),
            call(3, "get_concept_details", json!({"concept_id": 320136})),
        ];
        let first = run_session(&server, &script);
        let second = run_session(&server, &script);
        assert_eq!(first, second);

        let fresh_store = figure_store();
        let fresh = run_session(&Server::new(&fresh_store), &script);
        assert_eq!(first, fresh);
    }

    proptest! {
        /// Every non-notification frame is answered exactly once with its
        /// own id, whatever the method was.
        #[test]
        fn response_ids_echo_request_ids(
            ids in proptest::collection::vec(
                prop_oneof![
                    any::<i64>().prop_map(|n| json!(n)),
                    "[a-z0-9]{1,12}".prop_map(|s| json!(s)),
                ],
                1..8,
            ),
            methods in proptest::collection::vec(0usize..6, 1..8),
        ) {
            let store = figure_store();
            let server = Server::new(&store);
            let catalog = [
                "initialize", "tools/list", "tools/call",
                "resources/list", "resources/read", "bogus/method",
            ];
            let lines: Vec<Value> = ids
                .iter()
                .zip(methods.iter().cycle())
                .map(|(id, &m)| json!({
                    "jsonrpc": "2.0", "id": id, "method": catalog[m], "params": {},
                }))
                .collect();
            let responses = run_session(&server, &lines);
            prop_assert_eq!(responses.len(), lines.len());
            for (response, request) in responses.iter().zip(&lines) {
                prop_assert_eq!(&response["id"], &request["id"]);
                prop_assert_eq!(&response["jsonrpc"], &json!("2.0"));
                let answered =
                    response.get("result").is_some() ^ response.get("error").is_some();
                prop_assert!(answered, "exactly one of result/error: {}", response);
            }
        }
    }
}
