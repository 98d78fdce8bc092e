#![allow(dead_code)]

use std::thread::JoinHandle;
use std::time::Duration;

use entropy_core::platform::ClockMode;
use entropy_core::Timestamp;
use entropy_server::{build_state, router, ServerConfig};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::Value;
use tokio::sync::oneshot;

pub const TOKEN: &str = "test-token";

pub fn t0() -> Timestamp {
    Timestamp::parse_rfc3339("2026-03-02T00:00:00Z").unwrap()
}

/// In-process server on an ephemeral port, stopped on drop.
pub struct TestServer {
    pub base: String,
    pub client: Client,
    pub state: entropy_server::AppState,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn simulated() -> Self {
        let mut config = ServerConfig::default();
        config.server.token = TOKEN.into();
        config.clock.mode = ClockMode::Simulated;
        config.clock.start = Some(t0());
        Self::start(config)
    }

    pub fn start(config: ServerConfig) -> Self {
        let state = build_state(&config).expect("platform opens");
        let app = router(state.clone());
        let (stop, stopped) = oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stopped.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(10)).expect("server binds");
        TestServer {
            base: format!("http://{addr}/v1"),
            client: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(),
            state,
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> Response {
        self.client.get(self.url(path)).send().unwrap()
    }

    fn authed(&self, rb: RequestBuilder) -> RequestBuilder {
        rb.bearer_auth(TOKEN)
    }

    pub fn post(&self, path: &str, body: &Value) -> Response {
        self.authed(self.client.post(self.url(path))).json(body).send().unwrap()
    }

    pub fn put(&self, path: &str, body: &Value) -> Response {
        self.authed(self.client.put(self.url(path))).json(body).send().unwrap()
    }

    pub fn patch(&self, path: &str, body: &Value) -> Response {
        self.authed(self.client.patch(self.url(path))).json(body).send().unwrap()
    }

    pub fn delete(&self, path: &str) -> Response {
        self.authed(self.client.delete(self.url(path))).send().unwrap()
    }

    /// Asserts the status and returns the JSON body.
    pub fn expect(resp: Response, status: u16) -> Value {
        let got = resp.status().as_u16();
        let text = resp.text().unwrap();
        assert_eq!(got, status, "unexpected status, body: {text}");
        if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap()
        }
    }

    pub fn ok_get(&self, path: &str) -> Value {
        Self::expect(self.get(path), 200)
    }

    pub fn ok_post(&self, path: &str, body: &Value) -> Value {
        let resp = self.post(path, body);
        let status = resp.status().as_u16();
        assert!(status == 200 || status == 201, "POST {path} gave {status}: {}", resp.text().unwrap());
        resp.json().unwrap()
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Asserts the standard error envelope and returns its code.
pub fn error_code(resp: Response, status: u16) -> String {
    let body = TestServer::expect(resp, status);
    let err = body.get("error").unwrap_or_else(|| panic!("no error envelope in {body}"));
    assert!(err["message"].is_string(), "{body}");
    err["code"].as_str().unwrap().to_owned()
}
