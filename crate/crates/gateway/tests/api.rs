mod common;

use std::net::TcpListener;
use std::io::{Read, Write};

use common::*;
use qcqc_gateway::cli::{run_with, EXIT_IO, EXIT_OK, EXIT_VALIDATION};
use qcqc_gateway::Config;
use serde_json::{json, Value};

fn assert_shape(v: &Value, shape: &Shape) {
    if let Err(e) = check_shape(v, shape, "$") {
        panic!("shape mismatch: {e}\nbody: {v}");
    }
}

#[test]
fn health_reports_three_records() {
    let app = app(tiny_gallery());
    let (status, body) = block_on(call(&app, "GET", "/api/health", None));
    assert_eq!(status, 200);
    assert_shape(&body, &health_shape());
    assert_eq!(body["gallery_n"], 3);
    assert_eq!(body["dim"], 4);
    assert_eq!(body["levels"], 3);
}

#[test]
fn scheme_is_the_fitted_pair() {
    let app = app(tiny_gallery());
    let (status, body) = block_on(call(&app, "GET", "/api/scheme", None));
    assert_eq!(status, 200);
    assert_shape(&body, &scheme_shape());
    assert_eq!(body["rel"]["names"], json!(["Low", "Medium", "High"]));
    assert_eq!(body["aes"]["percentiles"], json!([33.0, 66.0]));
}

#[test]
fn retrieve_caps_eta_at_gallery_size() {
    let app = app(tiny_gallery());
    let (status, body) = block_on(call(
        &app,
        "POST",
        "/api/retrieve",
        Some(json!({"query_text": "a dog", "eta": 50})),
    ));
    assert_eq!(status, 200);
    assert_shape(&body, &retrieve_shape());
    let hits = body["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let mut ids: Vec<&str> = hits.iter().map(|h| h["id"].as_str().unwrap()).collect();
    ids.sort();
    assert_eq!(ids, ["a", "b", "c"]);
    for hit in hits {
        assert!(hit["rel_level"].is_string() && hit["aes_level"].is_string());
    }
}

#[test]
fn identity_pipeline_ignores_condition() {
    let app = app(synth(400, 3, 1));
    let names = ["Low", "Medium", "High"];
    let mut first: Option<Value> = None;
    for rel in names {
        for aes in names {
            let (status, body) = block_on(call(
                &app,
                "POST",
                "/api/pipeline",
                Some(json!({"prefix": "a dog", "rel": rel, "aes": aes, "method": "prefix", "eta": 5})),
            ));
            assert_eq!(status, 200);
            assert_shape(&body, &pipeline_shape());
            assert_eq!(body["candidates"][0]["text"], "a dog");
            let hits = body["hits_per_candidate"].clone();
            match &first {
                None => first = Some(hits),
                Some(f) => assert_eq!(f, &hits, "({rel}, {aes})"),
            }
        }
    }
    assert_eq!(first.unwrap()[0].as_array().unwrap().len(), 5);
}

#[test]
fn corpus_completion_respects_condition() {
    let app = app(synth(800, 3, 2));
    let (status, body) = block_on(call(
        &app,
        "POST",
        "/api/complete",
        Some(json!({"prefix": "a dog", "rel": "High", "aes": "Low", "k": 3})),
    ));
    assert_eq!(status, 200);
    assert_shape(&body, &complete_shape());
    let candidates = body["candidates"].as_array().unwrap();
    assert!(!candidates.is_empty() && candidates.len() <= 3);
    for c in candidates {
        assert!(c["text"].as_str().unwrap().starts_with("a dog"));
        assert_eq!(c["source"], "corpus");
        assert_eq!(c["condition"], json!({"rel_level": "High", "aes_level": "Low"}));
    }
}

#[test]
fn random_completion_is_seeded() {
    let app = app(synth(400, 3, 3));
    let req = json!({"prefix": "a cat", "rel": "Low", "aes": "Low", "method": "random", "seed": 9});
    let (_, a) = block_on(call(&app, "POST", "/api/complete", Some(req.clone())));
    let (_, b) = block_on(call(&app, "POST", "/api/complete", Some(req)));
    assert_shape(&a, &complete_shape());
    assert_eq!(a, b);
}

#[test]
fn eval_grid_for_one_prefix() {
    let app = app(synth(800, 3, 4));
    let (status, body) = block_on(call(
        &app,
        "POST",
        "/api/eval/grid",
        Some(json!({"config": {"prefixes": ["a dog"], "method": "corpus"}})),
    ));
    assert_eq!(status, 200);
    assert_shape(&body, &eval_report_shape());
    assert_eq!(body["cells"].as_array().unwrap().len(), 9);
    assert_eq!(body["metadata"]["pooling"], "items");

    let (status, body) = block_on(call(
        &app,
        "POST",
        "/api/eval/grid",
        Some(json!({"config": {"prefixes": ["a dog", "a cat"], "method": "rerank", "k": 3}})),
    ));
    assert_eq!(status, 200);
    assert_shape(&body, &eval_report_shape());
    assert_eq!(body["cells"].as_array().unwrap().len(), 1);
}

#[test]
fn gallery_stats_histograms() {
    let app = app(synth(300, 3, 5));
    let (status, body) = block_on(call(&app, "GET", "/api/gallery/stats?bins=10", None));
    assert_eq!(status, 200);
    assert_shape(&body, &stats_shape());
    let total: u64 = body["aes"]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, 300);
    assert_eq!(body["rel"]["edges"].as_array().unwrap().len(), 11);

    let (status, body) = block_on(call(&app, "GET", "/api/gallery/stats?bins=0", None));
    assert_eq!(status, 400);
    assert_shape(&body, &error_shape());
}

#[test]
fn validation_errors_are_400() {
    let app = app(tiny_gallery());
    let cases = [
        ("/api/complete", json!({"prefix": "", "rel": "High", "aes": "High"}), "empty_prefix"),
        ("/api/complete", json!({"prefix": "a dog", "rel": "Great", "aes": "High"}), "unknown_level"),
        ("/api/complete", json!({"prefix": "a dog", "rel": "High"}), "invalid_request"),
        ("/api/retrieve", json!({"query_text": "a dog", "eta": 0}), "invalid_request"),
        ("/api/retrieve", json!({"query_text": "   "}), "empty_text"),
        ("/api/complete", json!({"prefix": "a dog", "rel": "High", "aes": "High", "method": "external"}), "invalid_request"),
        ("/api/eval/grid", json!({"config": {"eta": 0}}), "invalid_request"),
    ];
    for (uri, body, code) in cases {
        let (status, resp) = block_on(call(&app, "POST", uri, Some(body.clone())));
        assert_eq!(status, 400, "{uri} {body}");
        assert_shape(&resp, &error_shape());
        assert_eq!(resp["code"], code, "{uri} {body}");
    }
}

#[test]
fn malformed_json_is_400() {
    let app = app(tiny_gallery());
    let req = axum::http::Request::builder()
        .method("POST")
        .uri("/api/retrieve")
        .header("content-type", "application/json")
        .body(axum::body::Body::from("{not json"))
        .unwrap();
    let resp = block_on(async {
        use tower::ServiceExt;
        app.clone().oneshot(req).await.unwrap()
    });
    assert_eq!(resp.status().as_u16(), 400);
}

#[test]
fn unknown_routes_are_404() {
    let app = app(tiny_gallery());
    for uri in ["/api/nope", "/api/gallery/nope", "/api", "/index.html"] {
        let (status, body) = block_on(call(&app, "GET", uri, None));
        assert_eq!(status, 404, "{uri}");
        assert_shape(&body, &error_shape());
        assert_eq!(body["code"], "not_found");
    }
    let (status, _) = block_on(call(&app, "POST", "/api/admin/reload", None));
    assert_eq!(status, 404);
}

fn stub_endpoint(status: u16, body: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().take(4) {
            let mut stream = stream.unwrap();
            let mut buf = [0u8; 8192];
            let mut seen = Vec::new();
            loop {
                let n = stream.read(&mut buf).unwrap_or(0);
                if n == 0 {
                    break;
                }
                seen.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&seen);
                if let Some(head_end) = text.find("\r\n\r\n") {
                    let len = text[..head_end]
                        .lines()
                        .find_map(|l| {
                            let (k, v) = l.split_once(':')?;
                            k.eq_ignore_ascii_case("content-length")
                                .then(|| v.trim().parse::<usize>().ok())?
                        })
                        .unwrap_or(0);
                    if seen.len() >= head_end + 4 + len {
                        break;
                    }
                }
            }
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    format!("http://{addr}/complete")
}

fn external_app(url: String) -> axum::Router {
    let config = Config {
        endpoint_url: Some(url),
        endpoint_timeout_secs: 5.0,
        ..Config::default()
    };
    app_with(tiny_gallery(), config).0
}

#[test]
fn external_completion_through_the_api() {
    let app = external_app(stub_endpoint(200, r#"{"completions":[" in a sunny park"]}"#));
    let (status, body) = block_on(call(
        &app,
        "POST",
        "/api/complete",
        Some(json!({"prefix": "a dog", "rel": "High", "aes": "High", "method": "external", "k": 1})),
    ));
    assert_eq!(status, 200, "{body}");
    assert_shape(&body, &complete_shape());
    assert_eq!(body["candidates"][0]["text"], "a dog in a sunny park");
    assert_eq!(body["candidates"][0]["source"], "external");
}

#[test]
fn endpoint_failures_are_502() {
    let app = external_app(stub_endpoint(500, r#"{"error":"boom"}"#));
    let req = json!({"prefix": "a dog", "rel": "High", "aes": "High", "method": "external"});
    let (status, body) = block_on(call(&app, "POST", "/api/complete", Some(req.clone())));
    assert_eq!(status, 502);
    assert_shape(&body, &error_shape());
    assert_eq!(body["code"], "endpoint_http_error");

    let app = external_app(stub_endpoint(200, r#"{"nope":1}"#));
    let (status, body) = block_on(call(&app, "POST", "/api/pipeline", Some(req.clone())));
    assert_eq!(status, 502);
    assert_eq!(body["code"], "endpoint_malformed");

    let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let app = external_app(format!("http://{closed}/complete"));
    let (status, body) = block_on(call(&app, "POST", "/api/complete", Some(req)));
    assert_eq!(status, 502);
    assert_eq!(body["code"], "endpoint_unreachable");
}

#[test]
fn admin_reload_swaps_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    qcqc_core::gallery::save(&synth(240, 3, 6), dir.path()).unwrap();
    let config = Config {
        admin: true,
        ..Config::default()
    };
    let (app, state) = app_with(tiny_gallery(), config);
    let before = state.snapshot();
    let (status, body) = block_on(call(
        &app,
        "POST",
        "/api/admin/reload",
        Some(json!({"gallery": dir.path()})),
    ));
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["gallery_n"], 240);
    // an in-flight holder keeps its snapshot
    assert_eq!(before.gallery.len(), 3);
    let (_, health) = block_on(call(&app, "GET", "/api/health", None));
    assert_eq!(health["gallery_n"], 240);
    assert_eq!(health["dim"], 256);
}

#[test]
fn concurrent_reads_match_serial() {
    let app = app(synth(600, 3, 7));
    let bodies: Vec<Value> = (0..12)
        .map(|i| json!({"query_text": format!("a {} photo", ["dog", "cat", "bus"][i % 3]), "eta": 7}))
        .collect();
    let serial: Vec<(u16, Value)> = bodies
        .iter()
        .map(|b| block_on(call(&app, "POST", "/api/retrieve", Some(b.clone()))))
        .collect();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();
    let parallel: Vec<(u16, Value)> = rt.block_on(async {
        let handles: Vec<_> = bodies
            .iter()
            .map(|b| {
                let app = app.clone();
                let b = b.clone();
                tokio::spawn(async move { call(&app, "POST", "/api/retrieve", Some(b)).await })
            })
            .collect();
        let mut out = Vec::new();
        for h in handles {
            out.push(h.await.unwrap());
        }
        out
    });
    assert_eq!(serial, parallel);
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["qcqc"];
    argv.extend_from_slice(args);
    let code = run_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

#[test]
fn cli_levels_then_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    let g = g.to_str().unwrap();
    let (code, out, _) = cli(&["synth", "--n", "400", "--seed", "3", "--out", g]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(serde_json::from_str::<Value>(&out).unwrap()["gallery_n"], 400);

    let (code, out, err) = cli(&["levels", "--gallery", g, "--p", "33,66"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let schemes: Value = serde_json::from_str(&out).unwrap();
    assert_shape(&schemes, &object(vec![("rel", level_scheme_shape()), ("aes", level_scheme_shape())]));
    assert!(dir.path().join("g/schemes.json").exists());

    let (code, out, err) = cli(&[
        "retrieve", "--gallery", g, "--query", "a dog", "--rel", "High", "--aes", "High", "--eta", "3",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let body: Value = serde_json::from_str(&out).unwrap();
    let hits = body["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    for hit in hits {
        assert_shape(hit, &hit_shape());
    }
    assert!(body["text"].as_str().unwrap().starts_with("a dog"));
}

#[test]
fn cli_eval_and_rerank_formats() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    let g = g.to_str().unwrap();
    assert_eq!(cli(&["synth", "--n", "300", "--out", g]).0, EXIT_OK);
    let prefixes = dir.path().join("prefixes.txt");
    std::fs::write(&prefixes, "a dog\na cat\n").unwrap();
    let p = prefixes.to_str().unwrap();

    let (code, out, err) = cli(&["eval", "--gallery", g, "--prefixes", p, "--method", "prefix"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_shape(&serde_json::from_str(&out).unwrap(), &eval_report_shape());

    let report = dir.path().join("r.csv");
    let (code, _, err) = cli(&[
        "eval", "--gallery", g, "--prefixes", p, "--format", "csv", "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 10);

    let (code, out, err) = cli(&["rerank", "--gallery", g, "--prefixes", p, "--k", "1,3"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let reports: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[1]["metadata"]["k"], 3);

    let (code, out, _) = cli(&["eval", "--gallery", g, "--prefixes", p, "--levels", "5", "--format", "md"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("| VH | VH |"));
}

#[test]
fn cli_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(
        &manifest,
        "{\"id\":\"a\",\"caption\":\"a dog\",\"aes\":5.0,\"rel\":0.3}\n{\"id\":\"b\",\"caption\":\"a cat\",\"aes\":4.0,\"rel\":0.2}\n{\"id\":\"c\",\"caption\":\"a cow\",\"aes\":6.0,\"rel\":0.1}\n",
    )
    .unwrap();
    let emb = dir.path().join("e.bin");
    let rows: Vec<Vec<f32>> = vec![
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.6, 0.8],
    ];
    let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
    qcqc_core::gallery::write_embeddings(std::fs::File::create(&emb).unwrap(), 4, &refs).unwrap();
    let out_dir = dir.path().join("g");
    let (code, out, err) = cli(&[
        "ingest",
        "--manifest",
        manifest.to_str().unwrap(),
        "--embeddings",
        emb.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["gallery_n"], 3);
    assert_eq!(summary["dim"], 4);
}

#[test]
fn cli_exit_codes() {
    assert_eq!(cli(&["frobnicate"]).0, EXIT_VALIDATION);
    assert_eq!(cli(&[]).0, EXIT_VALIDATION);
    assert_eq!(cli(&["--help"]).0, EXIT_OK);
    assert_eq!(cli(&["theory", "run", "--dims", "1,2"]).0, EXIT_VALIDATION);
    let missing = cli(&["complete", "--gallery", "/nonexistent/g", "--prefix", "a", "--rel", "High", "--aes", "High"]);
    assert_eq!(missing.0, EXIT_IO);

    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    let g = g.to_str().unwrap();
    assert_eq!(cli(&["synth", "--n", "200", "--out", g]).0, EXIT_OK);
    let bad = cli(&["complete", "--gallery", g, "--prefix", "a dog", "--rel", "Great", "--aes", "High"]);
    assert_eq!(bad.0, EXIT_VALIDATION);
    assert!(bad.2.contains("unknown_level"));
    let bad_config = dir.path().join("bad.conf");
    std::fs::write(&bad_config, "port = many\n").unwrap();
    assert_eq!(
        cli(&["--config", bad_config.to_str().unwrap(), "theory", "run", "--trials", "1"]).0,
        EXIT_VALIDATION
    );
}

#[test]
fn cli_theory_run_reports_counts() {
    let (code, out, err) = cli(&["theory", "run", "--trials", "10", "--seed", "3", "--dims", "8,8,7"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let report: Value = serde_json::from_str(&out).unwrap();
    let generated = report["generated"].as_u64().unwrap();
    let failures = report["generation_failures"].as_u64().unwrap();
    assert_eq!(generated + failures, 10);
    assert_eq!(report["violated"], 0);
    assert_eq!(report["holds"].as_u64().unwrap(), generated);
    assert!(report["worst"]["min_rank_excess"].as_i64().unwrap() >= 0);
}

#[test]
fn serves_static_assets_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>explorer</html>").unwrap();
    let config = Config {
        static_dir: Some(dir.path().to_path_buf()),
        ..Config::default()
    };
    let (app, _) = app_with(tiny_gallery(), config);
    let body = block_on(async {
        use tower::ServiceExt;
        let req = axum::http::Request::builder()
            .uri("/")
            .body(axum::body::Body::empty())
            .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap()
    });
    assert_eq!(&body[..], b"<html>explorer</html>");
    let (status, _) = block_on(call(&app, "GET", "/api/health", None));
    assert_eq!(status, 200);
    let (status, body) = block_on(call(&app, "GET", "/api/nope", None));
    assert_eq!((status, body["code"].as_str()), (404, Some("not_found")));
}
