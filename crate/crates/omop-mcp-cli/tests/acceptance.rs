//! Release gate: one test per published claim or hard behavioral contract,
//! each with its stated tolerance and runtime budget. `cargo test --test
//! acceptance` prints one pass/fail line per criterion.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use assert_cmd::Command;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use omop_mcp::athena::{
    FixtureIndex, GatewayConfig, HttpResponse, HttpTransport, ManualClock, TransportError,
    VocabularyStore,
};
use omop_mcp::eval::{
    agreement_matrix, percent, wilcoxon_signed_rank_with, Method, Relevance, WilcoxonError,
};
use omop_mcp::guard::{verify_mapping, Verdict};
use omop_mcp::vocabulary::{Concept, ConceptId, MappingResult, StandardKind, Validity};

fn bin() -> Command {
    let mut cmd = Command::cargo_bin("omop-mcp").expect("binary builds");
    cmd.env_remove("OMOP_MCP_FIXTURE");
    cmd.env_remove("ATHENA_BASE_URL");
    cmd.env_remove("OMOP_MCP_MAX_ATTEMPTS");
    cmd
}

fn repo_fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

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

/// Full selection reply for a concept, as a cooperative model would emit it.
fn selection_reply(id: i64, name: &str, keyword: &str) -> String {
    json!({
        "concept_id": id,
        "concept_name": name,
        "domain_id": "Condition",
        "class": "Clinical Finding",
        "validity": "Valid",
        "domain": "Condition",
        "vocabulary": "SNOMED",
        "concept_url": format!("https://athena.ohdsi.org/search-terms/terms/{id}"),
        "reasoning": format!("the candidate named {name:?} matches the keyword {keyword:?} exactly"),
        "inferred_keyword": keyword,
    })
    .to_string()
}

fn step(expect: &str, respond: &str) -> Value {
    json!({"expect_substring": expect, "respond": respond})
}

/// Guard soundness over fuzzed proposals: against a 500-concept snapshot,
/// exactly those proposals whose (id, normalized name) pair exists in the
/// snapshot pass verification. Zero false accepts, zero false rejects.
#[test]
fn grounding_guard_accepts_exactly_the_authentic_pairs() {
    let started = Instant::now();
    let names: Vec<String> = (1..=500).map(|i| format!("clinical finding {i:03}")).collect();
    let store = VocabularyStore::fixture(
        FixtureIndex::from_concepts((1..=500).map(|i| concept(i, &names[i as usize - 1]))).unwrap(),
    );

    // Expectation computed without the library's normalizer.
    let canonical =
        |name: &str| name.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");

    let mut rng = StdRng::seed_from_u64(0x5eed_ac5e);
    let mut accepts = 0usize;
    for case in 0..1_500usize {
        let id = rng.random_range(1..=700i64);
        let name = match case % 5 {
            // Authentic name, possibly with case and whitespace noise.
            0 | 1 => {
                let base = names.get(id as usize - 1).cloned().unwrap_or_else(|| "ghost".into());
                perturb_lettering(&base, &mut rng)
            }
            // Name borrowed from a different concept.
            2 => names[rng.random_range(0..names.len())].clone(),
            // Plausible but wrong wording.
            3 => format!("clinical finding {:03} syndrome", rng.random_range(1..=500)),
            // Arbitrary junk.
            _ => (0..rng.random_range(1..=12))
                .map(|_| char::from(rng.random_range(b'a'..=b'z')))
                .collect(),
        };
        let proposal = MappingResult {
            concept_id: ConceptId::new(id).unwrap(),
            concept_name: name.clone(),
            domain_id: "Condition".into(),
            concept_class: "Clinical Finding".into(),
            validity: "Valid".into(),
            domain: "Condition".into(),
            vocabulary: "SNOMED".into(),
            concept_url: format!("https://athena.ohdsi.org/search-terms/terms/{id}"),
            reasoning: "fuzzed proposal".into(),
            inferred_keyword: "fuzz".into(),
        };

        let should_accept =
            (1..=500).contains(&id) && canonical(&name) == canonical(&names[id as usize - 1]);
        match verify_mapping(&proposal, &store).expect("fixture lookups cannot fail") {
            Verdict::Verified(verified) => {
                assert!(should_accept, "false accept: id {id}, name {name:?}");
                assert_eq!(verified.concept.concept_id.get(), id);
                accepts += 1;
            }
            Verdict::Rejected(rejection) => {
                assert!(!should_accept, "false reject: id {id}, name {name:?}: {rejection:?}");
            }
        }
    }
    assert!(accepts > 100, "fuzz mix should include plenty of authentic pairs, saw {accepts}");
    assert!(started.elapsed() < Duration::from_secs(5), "took {:?}", started.elapsed());
}

fn perturb_lettering(base: &str, rng: &mut StdRng) -> String {
    let mut out = String::new();
    if rng.random_bool(0.3) {
        out.push_str("  ");
    }
    for c in base.chars() {
        if rng.random_bool(0.4) {
            out.extend(c.to_uppercase());
        } else {
            out.push(c);
        }
        if c == ' ' && rng.random_bool(0.2) {
            out.push(' ');
        }
    }
    if rng.random_bool(0.3) {
        out.push(' ');
    }
    out
}

fn write_batch_inputs(
    dir: &std::path::Path,
    count: usize,
    prefix: &str,
    id_base: i64,
    refuse_every: Option<usize>,
) -> (PathBuf, PathBuf, PathBuf) {
    let digits = if count >= 100 { 3 } else { 2 };
    let name = |i: usize| format!("{prefix} {i:0digits$}");

    let fixture_path = dir.join("concepts.ndjson");
    let fixture_lines: Vec<String> = (1..=count)
        .map(|i| serde_json::to_string(&concept(id_base + i as i64, &name(i))).unwrap())
        .collect();
    std::fs::write(&fixture_path, fixture_lines.join("\n") + "\n").unwrap();

    let terms_path = dir.join("terms.txt");
    let terms: Vec<String> = (1..=count).map(name).collect();
    std::fs::write(&terms_path, terms.join("\n") + "\n").unwrap();

    let mut steps = Vec::new();
    for i in 1..=count {
        let term = name(i);
        steps.push(step(&format!("Source term: {term}\n"), &term));
        let refuse = refuse_every.is_some_and(|every| i % every == 0);
        if refuse {
            steps.push(step(&format!("Inferred keyword: {term}\n"), "NO_MATCH"));
        } else {
            steps.push(step(
                &format!("Inferred keyword: {term}\n"),
                &selection_reply(id_base + i as i64, &term, &term),
            ));
        }
    }
    let transcript_path = dir.join("transcript.json");
    std::fs::write(&transcript_path, serde_json::to_string_pretty(&steps).unwrap()).unwrap();

    (fixture_path, terms_path, transcript_path)
}

/// Tool-grounded batch: 48 of 48 terms map (100.0%). Memory-only ablation
/// over the same terms: 5 fabricated ids and 43 name mismatches, so the
/// guard reports 10.4% non-existent ids, 89.6% mismatches, 0.0% success.
#[test]
fn tool_grounded_batch_succeeds_while_ablation_only_fabricates() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (fixture, terms, transcript) = write_batch_inputs(dir.path(), 48, "finding", 1000, None);

    bin()
        .args(["map"])
        .arg(&terms)
        .arg("--fixture")
        .arg(&fixture)
        .arg("--mock")
        .arg(&transcript)
        .assert()
        .success()
        .stderr(predicates::str::contains("retrieval success 100.0% (48/48)"));

    // Ablation transcript: the model answers from memory. Five terms get an
    // invented concept id; the other 43 reuse a real id with the wrong name.
    let mut steps = Vec::new();
    for i in 1..=48usize {
        let term = format!("finding {i:02}");
        let reply = if i <= 5 {
            selection_reply(9_000_000 + i as i64, &term, &term)
        } else {
            selection_reply(1000 + i as i64, "memory of a different finding", &term)
        };
        steps.push(step(&format!("Source term: {term}\n"), &reply));
    }
    let ablation_transcript = dir.path().join("ablation.json");
    std::fs::write(&ablation_transcript, serde_json::to_string_pretty(&steps).unwrap()).unwrap();

    bin()
        .args(["map"])
        .arg(&terms)
        .arg("--fixture")
        .arg(&fixture)
        .arg("--mock")
        .arg(&ablation_transcript)
        .arg("--no-tools")
        .assert()
        .success()
        .stderr(predicates::str::contains("retrieval success 0.0% (0/48)"))
        .stderr(predicates::str::contains("non_existent_id 10.4% (5)"))
        .stderr(predicates::str::contains("name_mismatch 89.6% (43)"));

    assert!(started.elapsed() < Duration::from_secs(10), "took {:?}", started.elapsed());
}

/// The abbreviation walkthrough: "CP" expands to the keyword "chest pain",
/// maps to concept 77670 with non-empty reasoning, and the emitted record is
/// the store's own verified copy.
#[test]
fn abbreviation_maps_end_to_end_with_verified_concept() {
    let started = Instant::now();
    let assertion = bin()
        .args(["map"])
        .arg(repo_fixture("demo_terms.txt"))
        .arg("--fixture")
        .arg(repo_fixture("demo_concepts.ndjson"))
        .arg("--mock")
        .arg(repo_fixture("demo_transcript.json"))
        .assert()
        .success();

    let stdout = String::from_utf8(assertion.get_output().stdout.clone()).unwrap();
    let row: Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(row["term"], json!("CP"));
    assert_eq!(row["outcome"], json!("success"));
    assert_eq!(row["mapping"]["concept_id"], json!(77670));
    assert_eq!(row["mapping"]["concept_name"], json!("Chest pain"));
    assert_eq!(row["mapping"]["inferred_keyword"], json!("chest pain"));
    assert!(!row["mapping"]["reasoning"].as_str().unwrap().trim().is_empty());
    assert_eq!(row["mapping"]["vocabulary"], json!("SNOMED"));
    assert!(started.elapsed() < Duration::from_secs(1), "took {:?}", started.elapsed());
}

/// Score-histogram arithmetic: mean system relevance 1.61 vs human 1.39
/// (two decimals) over 142 terms, and the agreement-matrix marginals give
/// 8.5% and 69.7% (system 0s and 2s), 24.6% and 64.1% (human 0s and 2s).
#[test]
fn score_histogram_means_and_marginals_match_published_aggregates() {
    let hist = |zeroes: usize, ones: usize, twos: usize| -> Vec<Relevance> {
        std::iter::repeat_n(0i64, zeroes)
            .chain(std::iter::repeat_n(1, ones))
            .chain(std::iter::repeat_n(2, twos))
            .map(|s| Relevance::new(s).unwrap())
            .collect()
    };
    let system = hist(12, 31, 99);
    let human = hist(35, 16, 91);
    assert_eq!(system.len(), 142);
    assert_eq!(human.len(), 142);

    let mean = |scores: &[Relevance]| {
        scores.iter().map(|s| s.get() as f64).sum::<f64>() / scores.len() as f64
    };
    assert_eq!(format!("{:.2}", mean(&system)), "1.61");
    assert_eq!(format!("{:.2}", mean(&human)), "1.39");

    // Any pairing with these marginals reproduces the percentages; the
    // zipped order is one such pairing.
    let matrix = agreement_matrix(&system, &human).unwrap();
    assert_eq!(matrix.total(), 142);
    assert_eq!(matrix.system_marginals(), [12, 31, 99]);
    assert_eq!(matrix.human_marginals(), [35, 16, 91]);
    assert_eq!(percent(12.0 / 142.0), "8.5%");
    assert_eq!(percent(99.0 / 142.0), "69.7%");
    assert_eq!(percent(35.0 / 142.0), "24.6%");
    assert_eq!(percent(91.0 / 142.0), "64.1%");
}

/// Brute-force oracle for the exact two-sided signed-rank p: enumerate all
/// 2^n sign assignments directly, with ranks computed by counting rather
/// than sorting.
fn oracle_exact_p(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    assert!(n <= 20, "oracle enumerates 2^n assignments");
    // Doubled average rank of |d_i| = 2*(#strictly smaller) + (#equal) + 1.
    let rank2: Vec<u64> = diffs
        .iter()
        .map(|d| {
            let smaller = diffs.iter().filter(|o| o.abs() < d.abs()).count() as u64;
            let equal = diffs.iter().filter(|o| o.abs() == d.abs()).count() as u64;
            2 * smaller + equal + 1
        })
        .collect();
    let total2: u64 = rank2.iter().sum();
    let observed_plus2: u64 =
        diffs.iter().zip(&rank2).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let observed = observed_plus2.min(total2 - observed_plus2);

    let mut extreme = 0u64;
    for mask in 0u64..(1u64 << n) {
        let plus2: u64 =
            rank2.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, r)| *r).sum();
        if plus2 <= observed || plus2 >= total2 - observed {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

/// Exact signed-rank p equals the brute-force oracle on 200 random
/// instances with n ≤ 12 (tolerance 1e-9); the normal approximation stays
/// within 0.02 of the exact p on 50 random instances with n = 20; inputs
/// with no nonzero differences are rejected as degenerate.
#[test]
fn wilcoxon_exact_path_matches_brute_force_oracle() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x0c0a_15e5);

    for case in 0..200 {
        let n = rng.random_range(1..=12usize);
        // Small integer differences so tied magnitudes are common; zero
        // differences are injected to exercise the drop rule.
        let mut a = Vec::with_capacity(n + 2);
        let mut b = Vec::with_capacity(n + 2);
        let mut diffs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut d = 0i64;
            while d == 0 {
                d = rng.random_range(-6..=6);
            }
            let base: i64 = rng.random_range(-10..=10);
            a.push((base + d) as f64);
            b.push(base as f64);
            diffs.push(d as f64);
        }
        if rng.random_bool(0.4) {
            a.push(3.0);
            b.push(3.0);
        }
        let result = wilcoxon_signed_rank_with(&a, &b, Method::Exact).unwrap();
        let oracle = oracle_exact_p(&diffs);
        assert!(
            (result.p_value - oracle).abs() < 1e-9,
            "case {case}: exact {} vs oracle {oracle} for diffs {diffs:?}",
            result.p_value
        );
    }

    for case in 0..50 {
        let n = 20usize;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let mut d = 0i64;
            while d == 0 {
                d = rng.random_range(-8..=8);
            }
            let base: i64 = rng.random_range(-10..=10);
            a.push((base + d) as f64);
            b.push(base as f64);
        }
        let exact = wilcoxon_signed_rank_with(&a, &b, Method::Exact).unwrap();
        let approx = wilcoxon_signed_rank_with(&a, &b, Method::NormalApprox).unwrap();
        assert!(
            (exact.p_value - approx.p_value).abs() < 0.02,
            "case {case}: exact {} vs approx {}",
            exact.p_value,
            approx.p_value
        );
    }

    let flat = [4.0, 4.0, 4.0];
    assert_eq!(
        wilcoxon_signed_rank_with(&flat, &flat, Method::Exact),
        Err(WilcoxonError::DegenerateInput)
    );
    assert!(started.elapsed() < Duration::from_secs(30), "took {:?}", started.elapsed());
}

/// A scripted stdio session reproduces the recorded transcript byte for
/// byte: correct ids, capabilities, -32700 on the malformed frame, -32601
/// on the unknown method, and the chest-pain payload naming concept 77670.
#[test]
fn mcp_session_matches_golden_transcript() {
    let started = Instant::now();
    let golden_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let input = std::fs::read_to_string(golden_dir.join("mcp_session.input")).unwrap();
    let expected = std::fs::read_to_string(golden_dir.join("mcp_session.golden")).unwrap();

    let assertion = bin()
        .args(["serve"])
        .arg("--fixture")
        .arg(repo_fixture("demo_concepts.ndjson"))
        .write_stdin(input)
        .assert()
        .success();
    let stdout = String::from_utf8(assertion.get_output().stdout.clone()).unwrap();
    assert_eq!(stdout, expected, "transcript drifted from the recording");

    let responses: Vec<Value> =
        stdout.lines().map(|line| serde_json::from_str(line).unwrap()).collect();
    let ids: Vec<Value> = responses.iter().map(|r| r["id"].clone()).collect();
    assert_eq!(ids, vec![json!(0), json!(1), json!(2), json!(3), json!(4), Value::Null, json!(5)]);
    assert!(responses[0]["result"]["capabilities"]["tools"].is_object());
    assert!(responses[0]["result"]["capabilities"]["resources"].is_object());
    assert_eq!(responses[5]["error"]["code"], json!(-32700));
    assert_eq!(responses[6]["error"]["code"], json!(-32601));
    let payload = responses[4]["result"]["content"][0]["text"].as_str().unwrap();
    assert!(payload.contains("77670"), "candidate payload: {payload}");
    assert!(started.elapsed() < Duration::from_secs(2), "took {:?}", started.elapsed());
}

/// Batch mapping is deterministic: a 150-term run produces the same
/// outcome sequence at parallelism 1 and parallelism 4, elapsed times
/// excluded.
#[test]
fn batch_outcomes_identical_across_parallelism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (fixture, terms, transcript) = write_batch_inputs(dir.path(), 150, "item", 2000, Some(10));

    let run = |parallelism: &str| -> Vec<Value> {
        let assertion = bin()
            .args(["map"])
            .arg(&terms)
            .arg("--fixture")
            .arg(&fixture)
            .arg("--mock")
            .arg(&transcript)
            .args(["--parallelism", parallelism])
            .assert()
            .success();
        let stdout = String::from_utf8(assertion.get_output().stdout.clone()).unwrap();
        stdout
            .lines()
            .map(|line| {
                let mut row: Value = serde_json::from_str(line).unwrap();
                row.as_object_mut().unwrap().remove("elapsed_seconds");
                row
            })
            .collect()
    };

    let sequential = run("1");
    let parallel = run("4");
    assert_eq!(sequential.len(), 150);
    assert_eq!(sequential, parallel);

    for (i, row) in sequential.iter().enumerate() {
        let expected = if (i + 1) % 10 == 0 { "no_mapping_found" } else { "success" };
        assert_eq!(row["outcome"], json!(expected), "term index {i}");
    }
    assert!(started.elapsed() < Duration::from_secs(20), "took {:?}", started.elapsed());
}

struct EmptySearchTransport {
    calls: std::sync::atomic::AtomicUsize,
}

impl HttpTransport for EmptySearchTransport {
    fn get(&self, _url: &str) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(HttpResponse { status: 200, body: r#"{"content":[],"totalElements":0}"#.to_string() })
    }
}

/// Under ATHENA_RATE_LIMIT_RPS=5 with an injected clock, a 100-query burst
/// never places more than 5 upstream calls inside any 1-second window.
#[test]
fn upstream_calls_never_exceed_rate_budget_in_any_window() {
    std::env::set_var("ATHENA_RATE_LIMIT_RPS", "5");
    let config = GatewayConfig::from_env().unwrap();
    std::env::remove_var("ATHENA_RATE_LIMIT_RPS");
    assert_eq!(config.rate_limit_rps, 5);

    let clock = ManualClock::shared();
    let transport =
        Box::new(EmptySearchTransport { calls: std::sync::atomic::AtomicUsize::new(0) });
    let store = VocabularyStore::live_with("http://athena.test", transport, config, clock);

    for i in 0..100 {
        // Distinct queries defeat the cache, so every call reaches upstream.
        store
            .search_concepts(&format!("burst query {i}"), &Default::default())
            .expect("scripted upstream cannot fail");
    }

    let grants = store.upstream_grants();
    assert_eq!(grants.len(), 100);
    for window in grants.windows(6) {
        assert!(window[5] - window[0] >= 1000, "six upstream calls within one second: {window:?}");
    }
}
