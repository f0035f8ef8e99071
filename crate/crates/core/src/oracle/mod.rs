//! Query-only access to classifiers, with exact per-row accounting.
//!
//! A [`QueryOracle`] answers batches of inputs with probability rows. Local models,
//! remote prediction services and the built-in HTTP server all sit behind the same trait,
//! and every oracle owns a [`QueryLedger`] counting the rows it was asked about. There is
//! no caching: repeated rows are answered and billed again.

mod ledger;
mod remote;
mod serve;

use std::sync::Arc;

pub use ledger::{LedgerSnapshot, QueryLedger, QueryPurpose};
pub use remote::{RemoteEndpoint, RemoteOracle};
pub use serve::{serve, ServerHandle};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::MlpModel;

/// A classifier seen only through its output scores.
///
/// Implementations must be deterministic and safe to call from several threads.
pub trait QueryOracle: Send + Sync {
    fn oracle_id(&self) -> &str;
    fn class_count(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn ledger(&self) -> &QueryLedger;

    /// Probabilities for each row of `batch`. The ledger is charged `batch.rows()` under
    /// `purpose` once the answer has been received.
    fn query(&self, batch: &Matrix, purpose: QueryPurpose) -> Result<Matrix>;

    fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        self.query(batch, QueryPurpose::Other)
    }
}

pub(crate) fn check_batch(oracle: &dyn QueryOracle, batch: &Matrix) -> Result<()> {
    if batch.cols() != oracle.input_dim() {
        return Err(Error::Shape {
            context: "oracle batch columns",
            expected: oracle.input_dim(),
            actual: batch.cols(),
        });
    }
    Ok(())
}

/// In-process oracle over an [`MlpModel`].
#[derive(Debug)]
pub struct LocalOracle {
    model: Arc<MlpModel>,
    ledger: QueryLedger,
}

impl LocalOracle {
    pub fn new(model: impl Into<Arc<MlpModel>>) -> Self {
        Self {
            model: model.into(),
            ledger: QueryLedger::new(),
        }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }
}

impl QueryOracle for LocalOracle {
    fn oracle_id(&self) -> &str {
        self.model.model_id()
    }

    fn class_count(&self) -> usize {
        self.model.class_count()
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    fn query(&self, batch: &Matrix, purpose: QueryPurpose) -> Result<Matrix> {
        check_batch(self, batch)?;
        let out = self.model.forward(batch)?;
        self.ledger.record(purpose, batch.rows() as u64);
        Ok(out)
    }
}

/// Wraps a model file path or an `http(s)://` URL.
pub fn open_oracle(spec: &str, endpoint: Option<RemoteEndpoint>) -> Result<Box<dyn QueryOracle>> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        let ep = endpoint.unwrap_or_else(|| RemoteEndpoint::new(spec));
        Ok(Box::new(RemoteOracle::connect(RemoteEndpoint {
            base_url: spec.to_string(),
            ..ep
        })?))
    } else {
        let model = MlpModel::load(std::path::Path::new(spec))?;
        Ok(Box::new(LocalOracle::new(model)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    fn model() -> MlpModel {
        MlpModel::init("local", 3, &[4], 2, &mut rng(1)).unwrap()
    }

    #[test]
    fn local_oracle_delegates_to_forward() {
        let m = model();
        let o = LocalOracle::new(m.clone());
        let batch = Matrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(o.predict_proba(&batch).unwrap(), m.forward(&batch).unwrap());
        assert_eq!(o.ledger().snapshot().other, 1);
    }

    #[test]
    fn empty_batch_is_free() {
        let o = LocalOracle::new(model());
        let out = o.predict_proba(&Matrix::zeros(0, 3)).unwrap();
        assert_eq!(out.rows(), 0);
        assert_eq!(o.ledger().total(), 0);
    }

    #[test]
    fn wrong_width_is_not_billed() {
        let o = LocalOracle::new(model());
        assert!(o.predict_proba(&Matrix::zeros(2, 5)).is_err());
        assert_eq!(o.ledger().total(), 0);
    }

    #[test]
    fn repeated_queries_are_billed_again() {
        let o = LocalOracle::new(model());
        let b = Matrix::zeros(5, 3);
        o.query(&b, QueryPurpose::Signature).unwrap();
        o.query(&b, QueryPurpose::Signature).unwrap();
        assert_eq!(o.ledger().snapshot().signature, 10);
    }
}
