use std::sync::Arc;
use std::time::Duration;

use super::wire;
use super::{Broker, ChannelEntry, ChannelId, CiotError, FieldSet, RefinedView, WriteOutcome};
use crate::time::Clock;

/// Identifies a channel and the keys used to talk to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelAccess {
    pub channel_id: ChannelId,
    pub write_key: String,
    pub read_key: String,
}

impl ChannelAccess {
    pub fn new(channel_id: ChannelId, write_key: &str, read_key: &str) -> Self {
        ChannelAccess {
            channel_id,
            write_key: write_key.to_string(),
            read_key: read_key.to_string(),
        }
    }
}

/// The protocol surface sensor nodes and the supervisor depend on.
///
/// A client instance is used from one task at a time.
pub trait ChannelClient {
    fn publish(&mut self, fields: &FieldSet) -> Result<WriteOutcome, CiotError>;
    fn fetch_last(&mut self) -> Result<Option<ChannelEntry>, CiotError>;
    fn fetch_feed(&mut self, results: usize) -> Result<Vec<ChannelEntry>, CiotError>;
    fn fetch_refined(&mut self, window: usize) -> Result<RefinedView, CiotError>;
}

impl<C: ChannelClient + ?Sized> ChannelClient for &mut C {
    fn publish(&mut self, fields: &FieldSet) -> Result<WriteOutcome, CiotError> {
        (**self).publish(fields)
    }
    fn fetch_last(&mut self) -> Result<Option<ChannelEntry>, CiotError> {
        (**self).fetch_last()
    }
    fn fetch_feed(&mut self, results: usize) -> Result<Vec<ChannelEntry>, CiotError> {
        (**self).fetch_feed(results)
    }
    fn fetch_refined(&mut self, window: usize) -> Result<RefinedView, CiotError> {
        (**self).fetch_refined(window)
    }
}

/// In-process client calling the broker directly, stamping requests with
/// the given clock.
pub struct LocalClient {
    broker: Arc<Broker>,
    access: ChannelAccess,
    clock: Arc<dyn Clock>,
}

impl LocalClient {
    pub fn new(broker: Arc<Broker>, access: ChannelAccess, clock: Arc<dyn Clock>) -> Self {
        LocalClient {
            broker,
            access,
            clock,
        }
    }
}

impl ChannelClient for LocalClient {
    fn publish(&mut self, fields: &FieldSet) -> Result<WriteOutcome, CiotError> {
        self.broker
            .write(&self.access.write_key, fields, self.clock.now())
    }

    fn fetch_last(&mut self) -> Result<Option<ChannelEntry>, CiotError> {
        self.broker
            .read_last(self.access.channel_id, &self.access.read_key)
    }

    fn fetch_feed(&mut self, results: usize) -> Result<Vec<ChannelEntry>, CiotError> {
        self.broker
            .read_feed(self.access.channel_id, &self.access.read_key, results)
    }

    fn fetch_refined(&mut self, window: usize) -> Result<RefinedView, CiotError> {
        self.broker
            .authorize_read(self.access.channel_id, &self.access.read_key)?;
        self.broker.refine(self.access.channel_id, window)
    }
}

/// Blocking HTTP client for the broker or any endpoint speaking the same
/// subset. Transport failures are reported, never retried.
pub struct HttpClient {
    endpoint: String,
    access: ChannelAccess,
    agent: ureq::Agent,
    retry_after: f64,
}

impl HttpClient {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

    pub fn new(endpoint: &str, access: ChannelAccess) -> Self {
        Self::with_timeout(endpoint, access, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(endpoint: &str, access: ChannelAccess, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpClient {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            access,
            agent,
            retry_after: 1.0,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn transport(&self, e: ureq::Error) -> CiotError {
        let retryable = !matches!(
            e,
            ureq::Error::BadUri(_)
                | ureq::Error::InvalidProxyUrl
                | ureq::Error::RequireHttpsOnly(_)
        );
        CiotError::Transport {
            endpoint: self.endpoint.clone(),
            message: e.to_string(),
            retryable,
            retry_after: retryable.then_some(self.retry_after),
        }
    }

    fn read_body(&self, resp: &mut ureq::http::Response<ureq::Body>) -> Result<String, CiotError> {
        resp.body_mut()
            .read_to_string()
            .map_err(|e| self.transport(e))
    }

    fn get(&self, path: &str, query: &[(&str, String)]) -> Result<(u16, String), CiotError> {
        let url = format!("{}{}", self.endpoint, path);
        let mut req = self.agent.get(&url);
        for (k, v) in query {
            req = req.query(*k, v);
        }
        let mut resp = req.call().map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        Ok((status, self.read_body(&mut resp)?))
    }
}

impl ChannelClient for HttpClient {
    fn publish(&mut self, fields: &FieldSet) -> Result<WriteOutcome, CiotError> {
        let url = format!("{}/update", self.endpoint);
        let body = wire::encode_update_form(&self.access.write_key, fields);
        let mut resp = self
            .agent
            .post(&url)
            .content_type("application/x-www-form-urlencoded")
            .send(body.as_str())
            .map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        let text = self.read_body(&mut resp)?;
        wire::parse_update_response(status, &text)
    }

    fn fetch_last(&mut self) -> Result<Option<ChannelEntry>, CiotError> {
        let id = self.access.channel_id;
        let (status, body) = self.get(
            &format!("/channels/{id}/feeds/last.json"),
            &[("api_key", self.access.read_key.clone())],
        )?;
        wire::parse_last_response(status, &body, id)
    }

    fn fetch_feed(&mut self, results: usize) -> Result<Vec<ChannelEntry>, CiotError> {
        let id = self.access.channel_id;
        let (status, body) = self.get(
            &format!("/channels/{id}/feeds.json"),
            &[
                ("api_key", self.access.read_key.clone()),
                ("results", results.to_string()),
            ],
        )?;
        if status != 200 {
            return Err(wire::status_error(status, &body, Some(id)));
        }
        wire::feed_from_json(&body)
    }

    fn fetch_refined(&mut self, window: usize) -> Result<RefinedView, CiotError> {
        let id = self.access.channel_id;
        let (status, body) = self.get(
            &format!("/channels/{id}/refined.json"),
            &[
                ("api_key", self.access.read_key.clone()),
                ("window", window.to_string()),
            ],
        )?;
        if status != 200 {
            return Err(wire::status_error(status, &body, Some(id)));
        }
        wire::refined_from_json(&body)
    }
}
