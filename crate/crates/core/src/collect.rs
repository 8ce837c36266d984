//! Collect rollouts from a chat-completion HTTP endpoint.
//!
//! Each prompt is sent as a single user message. In the default mode one
//! request asks for `n` choices; if the endpoint returns fewer, the remainder
//! is filled with single-choice requests. Failed requests are retried with
//! exponential backoff, and a prompt whose requests keep failing becomes a
//! record with an `error` field, which `label` skips.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::label::RolloutRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInput {
    pub prompt_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub api_key: Option<String>,
    /// Send `n` separate single-choice requests instead of one `n`-choice request.
    pub per_request: bool,
    pub attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: String::new(),
            n: 32,
            temperature: 1.0,
            max_tokens: None,
            api_key: None,
            per_request: false,
            attempts: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.attempts == 0 {
            return Err(Error::Config("attempts must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("invalid temperature {}", self.temperature)));
        }
        if self.model.is_empty() {
            return Err(Error::Config("model name is required".into()));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Prompts file: one `{prompt_id, text}` object per line.
pub fn read_prompts<R: BufRead>(reader: R) -> Result<Vec<PromptInput>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PromptInput =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(p);
    }
    Ok(out)
}

pub struct Collector {
    config: CollectConfig,
    client: reqwest::blocking::Client,
}

impl Collector {
    pub fn new(config: CollectConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { config, client })
    }

    fn request_once(&self, text: &str, n: usize) -> std::result::Result<Vec<String>, String> {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": text}],
            "n": n,
            "temperature": self.config.temperature,
        });
        if let Some(m) = self.config.max_tokens {
            body["max_tokens"] = json!(m);
        }
        let mut req = self.client.post(self.config.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| format!("request failed: {e}"))?;
        let status = resp.status();
        if !status.is_success() {
            let detail = resp.text().unwrap_or_default();
            return Err(format!("HTTP {status}: {}", detail.chars().take(200).collect::<String>()));
        }
        let v: Value = resp.json().map_err(|e| format!("invalid response body: {e}"))?;
        let choices = v
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| "response has no choices".to_string())?;
        let texts: Vec<String> = choices
            .iter()
            .filter_map(|c| c.pointer("/message/content").and_then(Value::as_str).map(str::to_owned))
            .collect();
        if texts.is_empty() {
            return Err("response has no message content".into());
        }
        Ok(texts)
    }

    fn request(&self, text: &str, n: usize) -> std::result::Result<Vec<String>, String> {
        let mut last = String::new();
        for attempt in 0..self.config.attempts {
            if attempt > 0 {
                thread::sleep(self.config.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.request_once(text, n) {
                Ok(t) => return Ok(t),
                Err(e) => last = e,
            }
        }
        Err(format!("{} after {} attempts", last, self.config.attempts))
    }

    pub fn collect_one(&self, prompt: &PromptInput) -> RolloutRecord {
        let n = self.config.n;
        let mut responses = Vec::with_capacity(n);
        let mut error = None;
        if !self.config.per_request {
            match self.request(&prompt.text, n) {
                Ok(mut t) => {
                    t.truncate(n);
                    responses = t;
                }
                Err(e) => error = Some(e),
            }
        }
        while error.is_none() && responses.len() < n {
            match self.request(&prompt.text, 1) {
                Ok(t) => responses.push(t.into_iter().next().expect("nonempty")),
                Err(e) => error = Some(e),
            }
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("model".to_string(), json!(self.config.model));
        metadata.insert("temperature".to_string(), json!(self.config.temperature));
        match error {
            Some(e) => RolloutRecord { prompt_id: prompt.prompt_id.clone(), responses: Vec::new(), metadata: Some(metadata), error: Some(e) },
            None => RolloutRecord { prompt_id: prompt.prompt_id.clone(), responses, metadata: Some(metadata), error: None },
        }
    }

    pub fn collect(&self, prompts: &[PromptInput]) -> Vec<RolloutRecord> {
        prompts.iter().map(|p| self.collect_one(p)).collect()
    }
}

/// Serialize records as JSON lines.
pub fn records_text(records: &[RolloutRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal HTTP server: `reply(request_index, body)` returns (status, body).
    fn serve<F>(requests: usize, reply: F) -> (String, Arc<AtomicUsize>)
    where
        F: Fn(usize, &Value) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        let seen = count.clone();
        thread::spawn(move || {
            for stream in listener.incoming().take(requests) {
                let mut stream = stream.unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(split) = text.find("\r\n\r\n") {
                        let len = text[..split]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= split + 4 + len {
                            break serde_json::from_slice::<Value>(&buf[split + 4..split + 4 + len]).unwrap_or(Value::Null);
                        }
                    }
                    if n == 0 {
                        break Value::Null;
                    }
                };
                let i = seen.fetch_add(1, Ordering::SeqCst);
                let (status, out) = reply(i, &body);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{out}",
                    out.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), count)
    }

    fn choices(texts: &[&str]) -> String {
        json!({"choices": texts.iter().map(|t| json!({"message": {"role": "assistant", "content": t}})).collect::<Vec<_>>()}).to_string()
    }

    fn config(url: String, n: usize) -> CollectConfig {
        CollectConfig {
            base_url: url,
            model: "m".into(),
            n,
            backoff_base: Duration::from_millis(1),
            ..CollectConfig::default()
        }
    }

    #[test]
    fn n_sample_request() {
        let (url, count) = serve(1, |_, body| {
            assert_eq!(body["n"], 3);
            assert_eq!(body["messages"][0]["content"], "q?");
            (200, choices(&["A", "B", "A"]))
        });
        let c = Collector::new(config(url, 3)).unwrap();
        let r = c.collect_one(&PromptInput { prompt_id: "p".into(), text: "q?".into() });
        assert_eq!(r.responses, vec!["A", "B", "A"]);
        assert!(r.error.is_none());
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn tops_up_when_endpoint_ignores_n() {
        let (url, count) = serve(3, |i, _| (200, choices(&[["A", "B", "C"][i]])));
        let c = Collector::new(config(url, 3)).unwrap();
        let r = c.collect_one(&PromptInput { prompt_id: "p".into(), text: "q".into() });
        assert_eq!(r.responses, vec!["A", "B", "C"]);
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_then_succeeds() {
        let (url, count) = serve(3, |i, _| if i < 2 { (503, "{}".into()) } else { (200, choices(&["D", "D"])) });
        let c = Collector::new(config(url, 2)).unwrap();
        let r = c.collect_one(&PromptInput { prompt_id: "p".into(), text: "q".into() });
        assert_eq!(r.responses, vec!["D", "D"]);
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn persistent_failure_becomes_error_record() {
        let (url, count) = serve(3, |_, _| (500, "{\"error\":\"boom\"}".into()));
        let c = Collector::new(config(url, 2)).unwrap();
        let recs = c.collect(&[PromptInput { prompt_id: "p".into(), text: "q".into() }]);
        assert_eq!(count.load(Ordering::SeqCst), 3);
        assert!(recs[0].error.as_deref().unwrap().contains("after 3 attempts"));
        let text = records_text(&recs).unwrap();
        assert!(crate::label::read_records(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn bearer_token_and_prompts_file() {
        let c = CollectConfig { api_key: Some("k".into()), ..config("http://x".into(), 1) };
        assert_eq!(c.endpoint(), "http://x/chat/completions");
        let ps = read_prompts("{\"prompt_id\":\"a\",\"text\":\"hi\"}\n\n".as_bytes()).unwrap();
        assert_eq!(ps.len(), 1);
        assert!(matches!(read_prompts("{".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(Collector::new(CollectConfig::default()).is_err());
    }
}
