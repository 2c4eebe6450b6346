use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use forge_core::inference::{
    BackoffPolicy, ChatBackend, ChatRequest, ContentPart, Endpoint, EndpointConfig, EndpointKind, InferenceError,
    OpenAiBackend,
};

#[derive(Default)]
struct Server {
    replies: Mutex<VecDeque<(u16, String)>>,
    seen: Mutex<Vec<(Option<String>, Value)>>,
}

async fn completions(State(s): State<Arc<Server>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    s.seen.lock().unwrap().push((auth, body));
    let (code, text) = s.replies.lock().unwrap().pop_front().unwrap_or((500, "exhausted".into()));
    (StatusCode::from_u16(code).unwrap(), text)
}

fn ok_body(text: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 2, "total_tokens": 13},
    })
    .to_string()
}

async fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Server>) {
    let state = Arc::new(Server { replies: Mutex::new(replies.into()), ..Default::default() });
    let app = Router::new().route("/v1/chat/completions", post(completions)).with_state(state.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), state)
}

fn endpoint(base: &str, kind: EndpointKind, key_env: &str) -> Endpoint {
    let mut cfg = EndpointConfig::new(base, "served-model", kind);
    cfg.backoff = BackoffPolicy::none();
    cfg.retry_limit = 2;
    cfg.api_key_env = Some(key_env.into());
    let backend: Arc<dyn ChatBackend> = Arc::new(OpenAiBackend::new().unwrap());
    Endpoint::new(cfg, backend).unwrap()
}

#[tokio::test]
async fn multimodal_request_shape_and_bearer_token() {
    std::env::set_var("FORGE_TEST_TOKEN_SHAPE", "sekrit");
    let (base, server) = serve(vec![(200, ok_body("Yes"))]).await;
    let ep = endpoint(&base, EndpointKind::Multimodal, "FORGE_TEST_TOKEN_SHAPE");
    let img = ContentPart::Image { data_base64: "iVBORw0=".into(), media_type: "image/png".into() };
    let req = ChatRequest::user("Is it consistent?", vec![img], EndpointKind::Multimodal).with_temperature(0.0);
    let resp = ep.complete(&req).await.unwrap();
    assert_eq!((resp.text.as_str(), resp.attempt_count), ("Yes", 1));
    assert_eq!(resp.usage.unwrap().completion_tokens, 2);

    let seen = server.seen.lock().unwrap();
    let (auth, body) = &seen[0];
    assert_eq!(auth.as_deref(), Some("Bearer sekrit"));
    assert_eq!(body["model"], "served-model");
    assert_eq!(body["temperature"], 0.0);
    let content = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(content[0]["image_url"]["url"], "data:image/png;base64,iVBORw0=");
    assert_eq!(content[1], json!({"type": "text", "text": "Is it consistent?"}));
}

#[tokio::test]
async fn text_only_sends_plain_string_content() {
    let (base, server) = serve(vec![(200, ok_body("<Instruction: a>\n<Response: b>"))]).await;
    let ep = endpoint(&base, EndpointKind::TextOnly, "FORGE_TEST_TOKEN_UNSET");
    ep.complete(&ChatRequest::user("Caption: a dog", vec![], EndpointKind::TextOnly)).await.unwrap();
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[0].0, None);
    assert_eq!(seen[0].1["messages"][0]["content"], "Caption: a dog");
    assert_eq!(seen[0].1["temperature"], 0.7);
}

#[tokio::test]
async fn server_errors_and_rate_limits_are_retried() {
    let (base, server) = serve(vec![(503, "busy".into()), (429, "slow down".into()), (200, ok_body("fine"))]).await;
    let ep = endpoint(&base, EndpointKind::Multimodal, "FORGE_TEST_TOKEN_UNSET");
    let resp = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap();
    assert_eq!((resp.text.as_str(), resp.attempt_count), ("fine", 3));
    assert_eq!(server.seen.lock().unwrap().len(), 3);
}

#[tokio::test]
async fn client_errors_fail_without_retry() {
    let (base, server) = serve(vec![(400, "bad model".into()), (200, ok_body("never"))]).await;
    let ep = endpoint(&base, EndpointKind::Multimodal, "FORGE_TEST_TOKEN_UNSET");
    let err = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap_err();
    match err {
        InferenceError::RequestFailed { attempts, cause } => {
            assert_eq!(attempts, 1);
            assert!(cause.contains("bad model"), "{cause}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.seen.lock().unwrap().len(), 1);
}

#[tokio::test]
async fn malformed_body_is_retried_once() {
    let (base, _) = serve(vec![(200, "{not json".into()), (200, ok_body("recovered"))]).await;
    let ep = endpoint(&base, EndpointKind::Multimodal, "FORGE_TEST_TOKEN_UNSET");
    let resp = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap();
    assert_eq!((resp.text.as_str(), resp.attempt_count), ("recovered", 2));

    let (base, server) = serve(vec![(200, "{}".into()), (200, "[]".into()), (200, ok_body("late"))]).await;
    let ep = endpoint(&base, EndpointKind::Multimodal, "FORGE_TEST_TOKEN_UNSET");
    let err = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap_err();
    assert!(matches!(err, InferenceError::RequestFailed { attempts: 2, .. }), "{err:?}");
    assert_eq!(server.seen.lock().unwrap().len(), 2);
}

#[tokio::test]
async fn unreachable_host_exhausts_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let ep = endpoint(&base, EndpointKind::Multimodal, "FORGE_TEST_TOKEN_UNSET");
    let err = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap_err();
    assert!(matches!(err, InferenceError::RequestFailed { attempts: 3, .. }), "{err:?}");
}
