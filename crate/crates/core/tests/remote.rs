use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use docpatch::backend::{
    fingerprint, Backend, BackendError, Health, InferenceRequest, MockBackend, MockReply, MockScript, RemoteBackend,
    RemoteConfig, WireRequest, WireResponse,
};
use docpatch::confidence::ScoredSequence;
use docpatch::filters::{FieldKind, FilterChain};
use docpatch::grid::GridSpec;
use docpatch::selection::{run_patch_selection, EngineSettings, ExtractionTask};
use image::{DynamicImage, GrayImage, Luma};
use tiny_http::{Header, Response, Server};

struct Seen {
    path: String,
    method: String,
    auth: Option<String>,
    body: String,
}

/// Serves requests with `reply(n, body)` until the test ends.
fn serve<F>(reply: F) -> (String, Arc<Mutex<Vec<Seen>>>)
where
    F: Fn(usize, &str) -> (u16, String) + Send + 'static,
{
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (n, mut req) in server.incoming_requests().enumerate() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            let (status, text) = reply(n, &body);
            log.lock().unwrap().push(Seen {
                path: req.url().to_string(),
                method: req.method().to_string(),
                auth,
                body,
            });
            let header = Header::from_bytes("Content-Type", "application/json").unwrap();
            let _ = req.respond(Response::from_string(text).with_status_code(status).with_header(header));
        }
    });
    (url, seen)
}

fn fast(url: &str) -> RemoteConfig {
    let mut cfg = RemoteConfig::new(url);
    cfg.backoff_initial = Duration::from_millis(5);
    cfg.timeout = Duration::from_secs(5);
    cfg
}

fn patch() -> DynamicImage {
    DynamicImage::ImageLuma8(GrayImage::from_fn(6, 4, |x, y| Luma([(x * 40 + y) as u8])))
}

const OK: &str = r#"{"tokens":[{"id":7,"text":"45","logprob":-0.25},{"id":2,"text":"</s>","logprob":-0.5,"special":true}],"finish_reason":"stop"}"#;

#[test]
fn request_wire_format_and_token() {
    let (url, seen) = serve(|_, _| (200, OK.to_string()));
    let mut cfg = fast(&url);
    cfg.bearer_token = Some("s3cret".into());
    let backend = RemoteBackend::new(cfg);
    let req = InferenceRequest::new(patch(), "depth?", 32).with_patch_index(3);
    let seq = backend.score_patch(&req).unwrap();
    assert_eq!(seq.tokens.len(), 2);
    assert!(seq.tokens[1].special);
    assert_eq!(seq.tokens[0].logprob, -0.25);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].path, "/v1/score");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer s3cret"));
    let body: WireRequest = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body.prompt, "depth?");
    assert_eq!(body.max_tokens, 32);
    assert_eq!(body.temperature, 0);
    assert!(body.logprobs);
    assert_eq!(body.image_format, "png");
    let raw: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(raw.as_object().unwrap().len(), 6);
    let png = base64::engine::general_purpose::STANDARD.decode(&body.image).unwrap();
    let decoded = image::load_from_memory(&png).unwrap();
    assert_eq!(fingerprint(&decoded), fingerprint(&patch()));
}

#[test]
fn positive_logprob_is_a_protocol_error() {
    let (url, seen) = serve(|_, _| {
        (200, r#"{"tokens":[{"id":1,"text":"4","logprob":0.5}],"finish_reason":"stop"}"#.to_string())
    });
    let backend = RemoteBackend::new(fast(&url));
    let err = backend.score_patch(&InferenceRequest::new(patch(), "p", 8)).unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1, "protocol errors are not retried");

    let (url, _) = serve(|_, _| (200, "not json".to_string()));
    let err = RemoteBackend::new(fast(&url)).score_patch(&InferenceRequest::new(patch(), "p", 8)).unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err:?}");
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let (url, seen) = serve(|n, _| if n < 2 { (503, "busy".into()) } else { (200, OK.into()) });
    let backend = RemoteBackend::new(fast(&url));
    assert!(backend.score_patch(&InferenceRequest::new(patch(), "p", 8)).is_ok());
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded_and_refusals_are_final() {
    let (url, seen) = serve(|_, _| (500, "down".into()));
    let backend = RemoteBackend::new(fast(&url));
    let err = backend.score_patch(&InferenceRequest::new(patch(), "p", 8)).unwrap_err();
    assert!(err.is_retryable());
    assert_eq!(seen.lock().unwrap().len(), 3);

    let (url, seen) = serve(|_, _| (422, "prompt too long".into()));
    let err = RemoteBackend::new(fast(&url)).score_patch(&InferenceRequest::new(patch(), "p", 8)).unwrap_err();
    assert_eq!(
        err,
        BackendError::Refused {
            status: 422,
            detail: "prompt too long".into()
        }
    );
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn healthcheck_outcomes() {
    let (url, seen) = serve(|_, _| (200, "{}".into()));
    assert_eq!(RemoteBackend::new(fast(&url)).healthcheck(), Health::Ok);
    assert_eq!(seen.lock().unwrap()[0].path, "/health");
    assert_eq!(seen.lock().unwrap()[0].method, "GET");

    let (url, _) = serve(|_, _| (404, "".into()));
    match RemoteBackend::new(fast(&url)).healthcheck() {
        Health::Unavailable(msg) => assert!(msg.starts_with("protocol:"), "{msg}"),
        Health::Ok => panic!("404 is not healthy"),
    }

    match RemoteBackend::new(fast("http://127.0.0.1:9")).healthcheck() {
        Health::Unavailable(msg) => assert!(msg.starts_with("transport:"), "{msg}"),
        Health::Ok => panic!("nothing listens on port 9"),
    }
}

#[test]
fn in_flight_requests_respect_the_cap() {
    let current = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let server = Arc::new(server);
    for _ in 0..8 {
        let (server, current, peak) = (Arc::clone(&server), Arc::clone(&current), Arc::clone(&peak));
        thread::spawn(move || {
            for req in server.incoming_requests() {
                let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                thread::sleep(Duration::from_millis(20));
                current.fetch_sub(1, Ordering::SeqCst);
                let _ = req.respond(Response::from_string(OK));
            }
        });
    }
    let mut cfg = fast(&url);
    cfg.parallelism = 2;
    let backend = RemoteBackend::new(cfg);
    thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| backend.score_patch(&InferenceRequest::new(patch(), "p", 8)).unwrap());
        }
    });
    assert!(peak.load(Ordering::SeqCst) <= 2);
}

/// The same scripted answers served by the mock in process and by a fake
/// HTTP server give identical selections.
#[test]
fn mock_and_remote_agree() {
    let page = DynamicImage::ImageLuma8(GrayImage::from_fn(40, 40, |x, y| Luma([(x * 5 + y * 3) as u8])));
    let spec = GridSpec::square(0.25).unwrap();
    let grid = docpatch::grid::build_grid(docpatch::grid::ImageDims::of(&page).unwrap(), &spec);
    let mut script = MockScript::new(MockReply::tokens([("none", -0.1)]));
    let mut by_fp = std::collections::HashMap::new();
    for rect in &grid.patches {
        let crop = docpatch::grid::crop(&page, rect).unwrap();
        let lp = -0.05 * (1.0 + rect.index as f64);
        let seq = ScoredSequence::from_pairs([(format!("{}", 100 + rect.index), lp)]);
        by_fp.insert(fingerprint(&crop), serde_json::to_string(&WireResponse::from_sequence(&seq)).unwrap());
        script = script.with_fingerprint(fingerprint(&crop), MockReply::Respond(seq));
    }
    let (url, _) = serve(move |_, body| {
        let req: WireRequest = serde_json::from_str(body).unwrap();
        let png = base64::engine::general_purpose::STANDARD.decode(&req.image).unwrap();
        let fp = fingerprint(&image::load_from_memory(&png).unwrap());
        (200, by_fp[&fp].clone())
    });
    let task = ExtractionTask::new("n", "n?", FilterChain::default_for(FieldKind::Numeric));
    let settings = EngineSettings::default();
    let a = run_patch_selection(&MockBackend::new(script), &page, &task, &spec, &settings).unwrap();
    let b = run_patch_selection(&RemoteBackend::new(fast(&url)), &page, &task, &spec, &settings).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.answer().unwrap(), "100");
}
