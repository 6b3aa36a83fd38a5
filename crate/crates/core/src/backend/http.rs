use std::time::Duration;

use super::{BackendError, Transport};

/// Largest response body accepted from a model server.
const BODY_LIMIT: u64 = 512 * 1024 * 1024;

/// Plain-text POSTs to a remote model server. No retries here; callers own
/// retry policy.
pub struct HttpTransport {
    id: String,
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(id: &str, base: &str, timeout_secs: u64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { id: id.to_string(), base: base.trim_end_matches('/').to_string(), agent }
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &str) -> Result<String, BackendError> {
        let url = format!("{}{}", self.base, path);
        let backend = self.id.clone();
        let fail = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout { backend: backend.clone() },
            other => BackendError::Unreachable { backend: backend.clone(), message: other.to_string() },
        };
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "text/plain; charset=utf-8")
            .send(body)
            .map_err(fail)?;
        let status = resp.status();
        let text = resp.body_mut().with_config().limit(BODY_LIMIT).read_to_string().map_err(fail)?;
        // error envelopes travel with 4xx/5xx statuses; anything else there is opaque
        if !status.is_success() && !text.starts_with("a3v/1 error ") && path != super::wire::COMPLETE_PATH {
            return Err(BackendError::Remote { backend: self.id.clone(), message: format!("HTTP {status}") });
        }
        if !status.is_success() && path == super::wire::COMPLETE_PATH {
            return Err(BackendError::Remote { backend: self.id.clone(), message: format!("HTTP {status}") });
        }
        Ok(text)
    }
}
