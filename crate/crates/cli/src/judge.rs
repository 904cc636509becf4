//! Judge client that posts requests to an HTTP endpoint.

use std::time::Duration;

use curate_core::validate::{JudgeClient, JudgeError, JudgeRequest, JudgeVerdict};

/// Sends each `JudgeRequest` as a JSON POST body and expects a
/// `JudgeVerdict` back.
pub struct HttpJudge {
    url: String,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { url: url.into(), agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl JudgeClient for HttpJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let mut resp = self.agent.post(&self.url).send_json(req).map_err(|e| match e {
            ureq::Error::Timeout(_) => JudgeError::Timeout,
            other => JudgeError::Transport(other.to_string()),
        })?;
        let verdict: JudgeVerdict = resp
            .body_mut()
            .read_json()
            .map_err(|e| JudgeError::InvalidVerdict(e.to_string()))?;
        if verdict.item_id != req.item_id {
            return Err(JudgeError::InvalidVerdict(format!(
                "verdict for `{}` in reply to `{}`",
                verdict.item_id, req.item_id
            )));
        }
        Ok(verdict)
    }
}
