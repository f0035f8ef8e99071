//! Experiment evaluation: correlation statistics, transfer matrices, replay of the
//! published distance tables and the end-to-end campaign runner.

mod campaign;
mod fixture;
mod stats;
mod transfer;

pub use campaign::{
    run_campaign, AttackBlock, CampaignConfig, CampaignReport, DataSource, DatasetBlock, GridSpec,
    LimeBlock, ModelSpec, VictimSpec, VictimTransfer,
};
pub use fixture::{
    compare_n_stability, model_family, rank_agreement, replay_paper_fixture, ClosestPair,
    DistanceTable, PaperFixture, ReplayReport, ReplayRow, StabilityReport, StabilityRow,
    CLOSEST_PAIRS_N, FIXTURE_TIE_TOLERANCE,
};
pub use stats::{average_ranks, median, pearson, spearman};
pub use transfer::{CorrelationRecord, TransferMatrix};
