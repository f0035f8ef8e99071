use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_batch, QueryLedger, QueryOracle, QueryPurpose};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const RESPONSE_LIMIT: u64 = 512 * 1024 * 1024;

/// Connection settings for a remote prediction service speaking the `/v1` protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    /// Rows per HTTP request; larger batches are split.
    pub max_batch_rows: usize,
    /// Extra attempts after a failed request.
    pub retries: usize,
    /// Upper bound on concurrently outstanding requests from one oracle.
    pub max_in_flight: usize,
}

impl RemoteEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            max_batch_rows: 1000,
            retries: 2,
            max_in_flight: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_batch_rows == 0 {
            return Err(Error::Config("max_batch_rows must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Serialize)]
pub(crate) struct PredictRequest<'a> {
    pub inputs: Vec<&'a [f64]>,
}

#[derive(Deserialize)]
pub(crate) struct PredictResponse {
    pub probs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct InfoResponse {
    pub class_count: usize,
    pub input_dim: usize,
}

#[derive(Deserialize)]
struct ErrorResponse {
    error: String,
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Retryable(String),
    Fatal(Error),
}

/// Oracle backed by an HTTP prediction service.
///
/// Rows are charged to the ledger per successfully answered request, so a chunk that is
/// retried is counted exactly once.
pub struct RemoteOracle {
    endpoint: RemoteEndpoint,
    agent: ureq::Agent,
    class_count: usize,
    input_dim: usize,
    ledger: QueryLedger,
    in_flight: InFlight,
}

impl RemoteOracle {
    /// Fetches `/v1/info` to learn the service's dimensions.
    pub fn connect(endpoint: RemoteEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut oracle = Self {
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                limit: endpoint.max_in_flight,
            },
            endpoint,
            agent,
            class_count: 0,
            input_dim: 0,
            ledger: QueryLedger::new(),
        };
        let info: InfoResponse = oracle.with_retries(|o| o.get_info())?;
        if info.class_count < 2 || info.input_dim == 0 {
            return Err(Error::Protocol(format!(
                "implausible model info: {} classes, {} inputs",
                info.class_count, info.input_dim
            )));
        }
        oracle.class_count = info.class_count;
        oracle.input_dim = info.input_dim;
        Ok(oracle)
    }

    pub fn endpoint(&self) -> &RemoteEndpoint {
        &self.endpoint
    }

    fn with_retries<T>(&self, mut f: impl FnMut(&Self) -> std::result::Result<T, Attempt>) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.endpoint.retries {
            match f(self) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(msg)) => {
                    log::debug!("attempt {attempt} against {} failed: {msg}", self.endpoint.base_url);
                    last = msg;
                }
            }
        }
        Err(Error::Transport {
            message: format!(
                "{} after {} attempts: {last}",
                self.endpoint.base_url,
                self.endpoint.retries + 1
            ),
            partial: self.ledger.snapshot(),
        })
    }

    fn read_body(resp: &mut ureq::http::Response<ureq::Body>) -> std::result::Result<String, Attempt> {
        resp.body_mut()
            .with_config()
            .limit(RESPONSE_LIMIT)
            .read_to_string()
            .map_err(|e| Attempt::Retryable(format!("reading response: {e}")))
    }

    fn classify_status(status: u16, body: &str) -> Attempt {
        if status >= 500 {
            Attempt::Retryable(format!("server status {status}"))
        } else {
            let msg = serde_json::from_str::<ErrorResponse>(body)
                .map(|e| e.error)
                .unwrap_or_else(|_| body.chars().take(200).collect());
            Attempt::Fatal(Error::Protocol(format!("status {status}: {msg}")))
        }
    }

    fn get_info(&self) -> std::result::Result<InfoResponse, Attempt> {
        let mut resp = self
            .agent
            .get(&self.endpoint.url("/v1/info"))
            .call()
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = Self::read_body(&mut resp)?;
        if status != 200 {
            return Err(Self::classify_status(status, &body));
        }
        serde_json::from_str(&body)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed info response: {e}"))))
    }

    fn post_chunk(&self, chunk: &Matrix) -> std::result::Result<Vec<Vec<f64>>, Attempt> {
        let body = serde_json::to_string(&PredictRequest {
            inputs: chunk.iter_rows().collect(),
        })
        .map_err(|e| Attempt::Fatal(Error::Protocol(e.to_string())))?;
        let _slot = self.in_flight.acquire();
        let mut resp = self
            .agent
            .post(&self.endpoint.url("/v1/predict"))
            .header("content-type", "application/json")
            .send(body.as_str())
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = Self::read_body(&mut resp)?;
        if status != 200 {
            return Err(Self::classify_status(status, &text));
        }
        let parsed: PredictResponse = serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(Error::Protocol(format!("malformed predict response: {e}")))
        })?;
        Ok(parsed.probs)
    }
}

impl QueryOracle for RemoteOracle {
    fn oracle_id(&self) -> &str {
        &self.endpoint.base_url
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    fn query(&self, batch: &Matrix, purpose: QueryPurpose) -> Result<Matrix> {
        check_batch(self, batch)?;
        let mut data = Vec::with_capacity(batch.rows() * self.class_count);
        let mut start = 0;
        while start < batch.rows() {
            let end = (start + self.endpoint.max_batch_rows).min(batch.rows());
            let idx: Vec<usize> = (start..end).collect();
            let chunk = batch.select_rows(&idx);
            let probs = self.with_retries(|o| o.post_chunk(&chunk))?;
            if probs.len() != chunk.rows() {
                return Err(Error::Protocol(format!(
                    "sent {} rows, received {}",
                    chunk.rows(),
                    probs.len()
                )));
            }
            for row in &probs {
                if row.len() != self.class_count {
                    return Err(Error::Protocol(format!(
                        "probability row has {} entries, expected {}",
                        row.len(),
                        self.class_count
                    )));
                }
                data.extend_from_slice(row);
            }
            self.ledger.record(purpose, chunk.rows() as u64);
            start = end;
        }
        Matrix::new(batch.rows(), self.class_count, data)
            .map_err(|e| Error::Protocol(format!("invalid probabilities: {e}")))
    }
}
