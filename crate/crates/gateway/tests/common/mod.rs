#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use axum::Router;
use qcqc_core::evalharness::{synthetic_gallery, SynthConfig};
use qcqc_core::quantile::{assign_levels_lenient, fit_gallery_schemes, LevelPreset};
use qcqc_core::{Gallery, GalleryRecord};
use qcqc_gateway::{router, AppState, Config, Snapshot};
use serde_json::Value;
use tower::ServiceExt;

/// Minimal JSON shape language for contract checks.
#[derive(Debug, Clone)]
pub enum Shape {
    Str,
    Num,
    Int,
    Bool,
    Any,
    Nullable(Box<Shape>),
    Array(Box<Shape>),
    /// Exactly these keys.
    Object(Vec<(&'static str, Shape)>),
}

pub fn nullable(s: Shape) -> Shape {
    Shape::Nullable(Box::new(s))
}

pub fn array(s: Shape) -> Shape {
    Shape::Array(Box::new(s))
}

pub fn object(fields: Vec<(&'static str, Shape)>) -> Shape {
    Shape::Object(fields)
}

pub fn check_shape(v: &Value, shape: &Shape, path: &str) -> Result<(), String> {
    let fail = |what: &str| Err(format!("{path}: expected {what}, got {v}"));
    match shape {
        Shape::Any => Ok(()),
        Shape::Str => if v.is_string() { Ok(()) } else { fail("string") },
        Shape::Num => if v.is_number() { Ok(()) } else { fail("number") },
        Shape::Int => if v.is_u64() || v.is_i64() { Ok(()) } else { fail("integer") },
        Shape::Bool => if v.is_boolean() { Ok(()) } else { fail("boolean") },
        Shape::Nullable(inner) => {
            if v.is_null() {
                Ok(())
            } else {
                check_shape(v, inner, path)
            }
        }
        Shape::Array(inner) => match v.as_array() {
            Some(items) => items
                .iter()
                .enumerate()
                .try_for_each(|(i, item)| check_shape(item, inner, &format!("{path}[{i}]"))),
            None => fail("array"),
        },
        Shape::Object(fields) => {
            let Some(map) = v.as_object() else {
                return fail("object");
            };
            for key in map.keys() {
                if !fields.iter().any(|(k, _)| k == key) {
                    return Err(format!("{path}: unexpected key {key:?}"));
                }
            }
            for (key, field) in fields {
                match map.get(*key) {
                    Some(value) => check_shape(value, field, &format!("{path}.{key}"))?,
                    None => return Err(format!("{path}: missing key {key:?}")),
                }
            }
            Ok(())
        }
    }
}

pub fn error_shape() -> Shape {
    object(vec![("code", Shape::Str), ("message", Shape::Str)])
}

pub fn health_shape() -> Shape {
    object(vec![
        ("status", Shape::Str),
        ("gallery_n", Shape::Int),
        ("dim", Shape::Int),
        ("levels", nullable(Shape::Int)),
    ])
}

pub fn level_scheme_shape() -> Shape {
    object(vec![
        ("names", array(Shape::Str)),
        ("percentiles", array(Shape::Num)),
        ("cuts", array(Shape::Num)),
    ])
}

pub fn scheme_shape() -> Shape {
    object(vec![
        ("rel", nullable(level_scheme_shape())),
        ("aes", nullable(level_scheme_shape())),
    ])
}

pub fn condition_shape() -> Shape {
    object(vec![("rel_level", Shape::Str), ("aes_level", Shape::Str)])
}

pub fn candidate_shape() -> Shape {
    object(vec![
        ("text", Shape::Str),
        ("suffix", Shape::Str),
        ("source", Shape::Str),
        ("matched_record_id", nullable(Shape::Str)),
        ("condition", condition_shape()),
        ("exact_condition_match", Shape::Bool),
    ])
}

pub fn hit_shape() -> Shape {
    object(vec![
        ("id", Shape::Str),
        ("score", Shape::Num),
        ("caption", Shape::Str),
        ("aes", nullable(Shape::Num)),
        ("rel", nullable(Shape::Num)),
        ("rel_level", nullable(Shape::Str)),
        ("aes_level", nullable(Shape::Str)),
    ])
}

pub fn complete_shape() -> Shape {
    object(vec![("candidates", array(candidate_shape()))])
}

pub fn retrieve_shape() -> Shape {
    object(vec![("hits", array(hit_shape()))])
}

pub fn pipeline_shape() -> Shape {
    object(vec![
        ("candidates", array(candidate_shape())),
        ("hits_per_candidate", array(array(hit_shape()))),
    ])
}

pub fn eval_report_shape() -> Shape {
    let prefix_result = object(vec![
        ("prefix", Shape::Str),
        ("query", nullable(Shape::Str)),
        ("hit_ids", array(Shape::Str)),
        ("ave_aes", nullable(Shape::Num)),
        ("ave_rel", nullable(Shape::Num)),
        ("items", Shape::Int),
        ("fallback", Shape::Bool),
        ("error", nullable(Shape::Str)),
    ]);
    let cell = object(vec![
        ("condition", nullable(condition_shape())),
        ("ave_aes", nullable(Shape::Num)),
        ("ave_rel", nullable(Shape::Num)),
        ("items", Shape::Int),
        ("skipped", Shape::Int),
        ("fallbacks", Shape::Int),
        ("unscored_hits", Shape::Int),
        ("per_prefix", array(prefix_result)),
    ]);
    let metadata = object(vec![
        ("gallery_hash", Shape::Str),
        ("gallery_n", Shape::Int),
        ("eta", Shape::Int),
        ("seed", Shape::Int),
        ("k", Shape::Int),
        ("pooling", Shape::Str),
        ("rel_scheme", nullable(level_scheme_shape())),
        ("aes_scheme", nullable(level_scheme_shape())),
    ]);
    object(vec![
        ("method", Shape::Str),
        ("metadata", metadata),
        ("cells", array(cell)),
    ])
}

pub fn stats_shape() -> Shape {
    let hist = object(vec![("edges", array(Shape::Num)), ("counts", array(Shape::Int))]);
    object(vec![
        ("gallery_n", Shape::Int),
        ("bins", Shape::Int),
        ("aes", hist.clone()),
        ("rel", hist),
        ("scored", Shape::Int),
    ])
}

/// Three scored records in four dimensions with three-level schemes.
pub fn tiny_gallery() -> Gallery {
    let records = vec![
        GalleryRecord::new("a", "a dog on grass", vec![1.0, 0.0, 0.0, 0.0]).with_scores(6.0, 0.4),
        GalleryRecord::new("b", "a cat on a sofa", vec![0.0, 1.0, 0.0, 0.0]).with_scores(4.0, 0.2),
        GalleryRecord::new("c", "a dog in the rain", vec![0.0, 0.0, 0.6, 0.8])
            .with_scores(5.0, 0.3),
    ];
    let gallery = Gallery::new(records).unwrap();
    let preset = LevelPreset::Three;
    let (rel, aes) = fit_gallery_schemes(&gallery, preset.names(), preset.percentiles()).unwrap();
    assign_levels_lenient(gallery, rel, aes).0
}

pub fn synth(n: usize, levels: usize, seed: u64) -> Gallery {
    synthetic_gallery(&SynthConfig::new(n, levels, seed)).unwrap()
}

pub fn app_with(gallery: Gallery, config: Config) -> (Router, Arc<AppState>) {
    let state = AppState::new(Snapshot::new(gallery, &config, None), config);
    (router(state.clone()), state)
}

pub fn app(gallery: Gallery) -> Router {
    app_with(gallery, Config::default()).0
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (u16, Value) {
    let body = match body {
        Some(b) => Body::from(b.to_string()),
        None => Body::empty(),
    };
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

pub fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
        .block_on(f)
}
