use std::sync::Arc;

use nglm::library::toy_library;
use nglm::service::http::{parse_sse, router, ApiError, CreatedSession, DoneEvent, Health};
use nglm::service::{ChatService, ServedModel, ServiceOptions, SessionView};
use nglm_core::sampler::SamplerConfig;
use nglm_core::{ModelBundle, ModelConfig};

struct Server {
    base: String,
    _rt: tokio::runtime::Runtime,
}

fn start() -> Server {
    let bundle = ModelBundle::<f32>::random(ModelConfig::tiny(2, 16, 2), 2).unwrap();
    let options = ServiceOptions {
        sampler: SamplerConfig {
            max_new_tokens: 10,
            ..SamplerConfig::default()
        },
        library: Some(toy_library()),
        ..ServiceOptions::default()
    };
    let svc = Arc::new(ChatService::new(ServedModel::Float { bundle, adapter: None }, options).unwrap());
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(async move { axum::serve(listener, router(svc)).await });
    Server { base, _rt: rt }
}

#[test]
fn session_lifecycle_over_http() {
    let s = start();
    let c = reqwest::blocking::Client::new();
    let health: Health = c.get(format!("{}/v1/health", s.base)).send().unwrap().json().unwrap();
    assert_eq!((health.status.as_str(), health.model.as_str(), health.sessions), ("ok", "float", 0));

    let resp = c
        .post(format!("{}/v1/sessions", s.base))
        .json(&serde_json::json!({ "temperature": 0.5, "top_p": 0.9 }))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 201);
    let created: CreatedSession = resp.json().unwrap();
    assert_eq!((created.sampler.temperature, created.sampler.top_p), (0.5, 0.9));

    let resp = c
        .post(format!("{}/v1/sessions/{}/messages", s.base, created.session_id))
        .json(&serde_json::json!({ "text": "What is pink eye?", "debug": true }))
        .send()
        .unwrap();
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    let frames = parse_sse(&resp.text().unwrap());
    let done: DoneEvent = serde_json::from_str(&frames.last().unwrap().data).unwrap();
    assert_eq!(frames.last().unwrap().event, "done");
    assert_eq!(done.reply.selected_doc_id.as_deref(), Some("conjunctivitis"));
    assert!(done.reply.designed_prompt.is_some());
    assert_eq!(done.metrics.pairs, 1);

    let view: SessionView = c
        .get(format!("{}/v1/sessions/{}", s.base, created.session_id))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(view.history.len(), 2);
    assert_eq!(view.history[1].text, done.reply.message.text);
}

#[test]
fn errors_carry_status_and_field() {
    let s = start();
    let c = reqwest::blocking::Client::new();
    let resp = c
        .post(format!("{}/v1/sessions", s.base))
        .json(&serde_json::json!({ "temperature": -1.0 }))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 400);
    let err: ApiError = resp.json().unwrap();
    assert_eq!(err.field.as_deref(), Some("temperature"));

    let resp = c
        .post(format!("{}/v1/sessions", s.base))
        .json(&serde_json::json!({ "tempreature": 1.0 }))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 400);

    let missing = uuid::Uuid::new_v4();
    let resp = c.get(format!("{}/v1/sessions/{missing}", s.base)).send().unwrap();
    assert_eq!(resp.status(), 404);
    let resp = c
        .post(format!("{}/v1/sessions/{missing}/messages", s.base))
        .json(&serde_json::json!({ "text": "hi" }))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 404);
    let resp = c.get(format!("{}/v1/sessions/not-a-uuid", s.base)).send().unwrap();
    assert_eq!(resp.status(), 400);

    let created: CreatedSession = c.post(format!("{}/v1/sessions", s.base)).send().unwrap().json().unwrap();
    let resp = c
        .post(format!("{}/v1/sessions/{}/messages", s.base, created.session_id))
        .json(&serde_json::json!({ "text": "   " }))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 400);
    assert_eq!(resp.json::<ApiError>().unwrap().field.as_deref(), Some("text"));
}
