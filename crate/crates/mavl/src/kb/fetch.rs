//! Optional description fetcher backed by an external LLM endpoint.
//!
//! Responses are cached on disk keyed by (entity, aspect, prompt-template
//! hash); repeat calls are served from the cache and issue no network
//! request. Everything else in the crate works without this module ever
//! touching the network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::KbError;

/// Environment variable naming the endpoint URL.
pub const ENV_URL: &str = "MAVL_LLM_URL";
/// Environment variable holding the bearer key, if the endpoint needs one.
pub const ENV_KEY: &str = "MAVL_LLM_KEY";

/// Wire format: request body sent to the endpoint.
#[derive(Serialize)]
struct LlmRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

/// Wire format: response body expected from the endpoint.
#[derive(Deserialize)]
struct LlmResponse {
    text: String,
}

/// Endpoint and cache configuration for [`fetch_descriptions`].
#[derive(Debug, Clone)]
pub struct LlmClient {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Template with `{entity}` and `{aspect}` placeholders.
    pub prompt_template: String,
    pub cache_dir: PathBuf,
    pub timeout_secs: u64,
}

impl LlmClient {
    /// Build a client from `MAVL_LLM_URL` / `MAVL_LLM_KEY` plus a prompt
    /// template file.
    pub fn from_env(template_path: &Path, cache_dir: &Path) -> Result<Self, KbError> {
        let url = std::env::var(ENV_URL).map_err(|_| KbError::Network {
            entity: String::new(),
            aspect: String::new(),
            detail: format!("{ENV_URL} is not set"),
        })?;
        Ok(Self {
            url,
            api_key: std::env::var(ENV_KEY).ok(),
            model: "gpt-4".to_string(),
            prompt_template: std::fs::read_to_string(template_path)?,
            cache_dir: cache_dir.to_path_buf(),
            timeout_secs: 30,
        })
    }

    fn render_prompt(&self, entity: &str, aspect: &str) -> String {
        self.prompt_template
            .replace("{entity}", entity)
            .replace("{aspect}", aspect)
    }

    fn cache_path(&self, entity: &str, aspect: &str) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(entity.as_bytes());
        hasher.update([0x1f]);
        hasher.update(aspect.as_bytes());
        hasher.update([0x1f]);
        hasher.update(Sha256::digest(self.prompt_template.as_bytes()));
        let digest = hasher.finalize();
        self.cache_dir.join(format!("{}.txt", hex(&digest[..16])))
    }

    fn request(&self, entity: &str, aspect: &str) -> Result<String, KbError> {
        let prompt = self.render_prompt(entity, aspect);
        let body = serde_json::to_string(&LlmRequest { model: &self.model, prompt: &prompt })
            .expect("request serializes");
        let net_err = |detail: String| KbError::Network {
            entity: entity.to_string(),
            aspect: aspect.to_string(),
            detail,
        };

        let mut req = ureq::post(&self.url)
            .timeout(std::time::Duration::from_secs(self.timeout_secs))
            .set("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        let response = req.send_string(&body).map_err(|e| net_err(e.to_string()))?;
        let text = response.into_string().map_err(|e| net_err(e.to_string()))?;
        let parsed: LlmResponse =
            serde_json::from_str(&text).map_err(|e| net_err(format!("bad response body: {e}")))?;
        Ok(parsed.text)
    }
}

/// Fetch one description per aspect for `entity`, consulting the disk cache
/// first. Cache writes are atomic (write-then-rename), so concurrent callers
/// never observe partial entries.
pub fn fetch_descriptions(
    entity: &str,
    aspect_names: &[String],
    client: &LlmClient,
) -> Result<BTreeMap<String, String>, KbError> {
    std::fs::create_dir_all(&client.cache_dir)?;
    let mut out = BTreeMap::new();
    for aspect in aspect_names {
        let path = client.cache_path(entity, aspect);
        let text = match read_cache(&path)? {
            Some(text) => text,
            None => {
                let text = client.request(entity, aspect)?;
                write_cache(&path, &text)?;
                text
            }
        };
        out.insert(aspect.clone(), text);
    }
    Ok(out)
}

fn read_cache(path: &Path) -> Result<Option<String>, KbError> {
    match std::fs::read(path) {
        Ok(bytes) => match String::from_utf8(bytes) {
            Ok(text) if !text.is_empty() => Ok(Some(text)),
            _ => Err(KbError::CacheCorrupt(path.to_path_buf())),
        },
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_cache(path: &Path, text: &str) -> Result<(), KbError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal HTTP server answering every POST with a fixed JSON body.
    fn spawn_mock(hits: Arc<AtomicUsize>, reply_text: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                hits.fetch_add(1, Ordering::SeqCst);
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let body = format!("{{\"text\":\"{reply_text}\"}}");
                let response = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                    body.len(),
                    body
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    fn client(url: &str, cache: &Path) -> LlmClient {
        LlmClient {
            url: url.to_string(),
            api_key: None,
            model: "mock".into(),
            prompt_template: "describe the {aspect} of {entity}".into(),
            cache_dir: cache.to_path_buf(),
            timeout_secs: 2,
        }
    }

    #[test]
    fn cold_call_hits_endpoint_and_writes_cache() {
        let hits = Arc::new(AtomicUsize::new(0));
        let url = spawn_mock(hits.clone(), "speckled and grainy");
        let dir = tempfile::tempdir().unwrap();
        let c = client(&url, dir.path());

        let out =
            fetch_descriptions("covid-19", &["texture".to_string()], &c).unwrap();
        assert_eq!(out["texture"], "speckled and grainy");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert!(c.cache_path("covid-19", "texture").exists());
    }

    #[test]
    fn cached_call_issues_no_request() {
        let hits = Arc::new(AtomicUsize::new(0));
        let url = spawn_mock(hits.clone(), "ring shaped");
        let dir = tempfile::tempdir().unwrap();
        let c = client(&url, dir.path());

        fetch_descriptions("covid-19", &["shape".to_string()], &c).unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        let again = fetch_descriptions("covid-19", &["shape".to_string()], &c).unwrap();
        assert_eq!(again["shape"], "ring shaped");
        assert_eq!(hits.load(Ordering::SeqCst), 1, "second call must be cache-only");
    }

    #[test]
    fn template_change_invalidates_cache_key() {
        let dir = tempfile::tempdir().unwrap();
        let a = client("http://127.0.0.1:1", dir.path());
        let mut b = a.clone();
        b.prompt_template = "something else about {entity} {aspect}".into();
        assert_ne!(a.cache_path("x", "y"), b.cache_path("x", "y"));
    }

    #[test]
    fn unreachable_endpoint_with_empty_cache_is_network_error() {
        let dir = tempfile::tempdir().unwrap();
        // Port 1 is never listening.
        let c = client("http://127.0.0.1:1", dir.path());
        let err = fetch_descriptions("covid-19", &["texture".to_string()], &c).unwrap_err();
        match err {
            KbError::Network { entity, aspect, .. } => {
                assert_eq!(entity, "covid-19");
                assert_eq!(aspect, "texture");
            }
            other => panic!("expected network error, got {other}"),
        }
    }

    #[test]
    fn corrupt_cache_detected() {
        let dir = tempfile::tempdir().unwrap();
        let c = client("http://127.0.0.1:1", dir.path());
        let path = c.cache_path("covid-19", "border");
        std::fs::create_dir_all(dir.path()).unwrap();
        std::fs::write(&path, [0xff, 0xfe, 0x00]).unwrap();
        let err = fetch_descriptions("covid-19", &["border".to_string()], &c).unwrap_err();
        assert!(matches!(err, KbError::CacheCorrupt(_)));
    }
}
