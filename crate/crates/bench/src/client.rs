//! Minimal blocking client for the gateway routes the harness drives.

use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Account {
    pub id: u64,
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone)]
pub struct Gateway {
    http: Client,
    base: String,
}

pub type Result<T> = std::result::Result<T, String>;

fn expect_ok(resp: std::result::Result<Response, reqwest::Error>, what: &str) -> Result<Response> {
    let resp = resp.map_err(|e| format!("{what}: {e}"))?;
    if resp.status().is_success() {
        Ok(resp)
    } else {
        let status = resp.status();
        let body = resp.text().unwrap_or_default();
        Err(format!("{what}: HTTP {status}: {body}"))
    }
}

impl Gateway {
    pub fn new(base_url: &str) -> Result<Self> {
        let http = Client::builder()
            .timeout(Duration::from_secs(120))
            .pool_max_idle_per_host(64)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self { http, base: base_url.trim_end_matches('/').to_owned() })
    }

    fn req(&self, method: reqwest::Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{}", self.base, path))
    }

    fn authed(&self, who: &Account, method: reqwest::Method, path: &str) -> RequestBuilder {
        self.req(method, path).basic_auth(&who.username, Some(&who.password))
    }

    /// Any HTTP answer counts as reachable.
    pub fn probe(&self) -> std::result::Result<(), reqwest::Error> {
        self.req(reqwest::Method::GET, "/services").send().map(|_| ())
    }

    pub fn validate(&self, body: &[u8]) -> Result<()> {
        let resp = self
            .req(reqwest::Method::POST, "/validate")
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send();
        expect_ok(resp, "validate").map(|_| ())
    }

    pub fn register(&self, username: &str, password: &str, role: &str) -> Result<Account> {
        let resp = self
            .req(reqwest::Method::POST, "/services")
            .json(&json!({"username": username, "password": password, "role": role}))
            .send();
        let body: Value = expect_ok(resp, "register")?.json().map_err(|e| e.to_string())?;
        let id = body["serviceId"].as_u64().ok_or("register: response lacks serviceId")?;
        Ok(Account { id, username: username.to_owned(), password: password.to_owned() })
    }

    pub fn delete_self(&self, who: &Account) -> Result<()> {
        let resp = self.authed(who, reqwest::Method::DELETE, &format!("/services/{}", who.id)).send();
        expect_ok(resp, "delete service").map(|_| ())
    }

    pub fn map(&self, producer: &Account, event_type: &str, consumer_ids: &[u64]) -> Result<()> {
        let resp = self
            .authed(producer, reqwest::Method::POST, "/mappings")
            .json(&json!({"eventType": event_type, "consumerIds": consumer_ids}))
            .send();
        expect_ok(resp, "set mapping").map(|_| ())
    }

    pub fn unmap_all(&self, producer: &Account) -> Result<()> {
        let resp = self.authed(producer, reqwest::Method::DELETE, "/mappings").send();
        expect_ok(resp, "delete mappings").map(|_| ())
    }

    pub fn publish(&self, producer: &Account, event_type: &str, body: &[u8]) -> Result<()> {
        let resp = self
            .authed(producer, reqwest::Method::POST, &format!("/publish/{event_type}"))
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send();
        expect_ok(resp, "publish").map(|_| ())
    }

    /// One non-blocking fetch; returns the message ids.
    pub fn fetch(&self, consumer: &Account, max: usize) -> Result<Vec<u64>> {
        let resp = self.authed(consumer, reqwest::Method::GET, &format!("/consume?max={max}&wait=0")).send();
        let body: Value = expect_ok(resp, "consume")?.json().map_err(|e| e.to_string())?;
        let messages = body["messages"].as_array().ok_or("consume: response lacks messages")?;
        messages.iter().map(|m| m["messageId"].as_u64().ok_or_else(|| "consume: message lacks id".to_owned())).collect()
    }

    pub fn ack(&self, consumer: &Account, ids: &[u64]) -> Result<()> {
        let resp =
            self.authed(consumer, reqwest::Method::POST, "/consume/ack").json(&json!({"messageIds": ids})).send();
        expect_ok(resp, "ack").map(|_| ())
    }

    /// Fetches and acks until the queue is empty; returns how many were drained.
    pub fn drain(&self, consumer: &Account, batch: usize) -> Result<u64> {
        let mut total = 0;
        loop {
            let ids = self.fetch(consumer, batch)?;
            if ids.is_empty() {
                return Ok(total);
            }
            self.ack(consumer, &ids)?;
            total += ids.len() as u64;
        }
    }
}
