//! Best-match similarity scoring, tiered memorisation scores and the
//! expected-count formulas with their simulation checks.

pub mod expectation;
pub mod matching;
pub mod scorer;

pub use expectation::{
    expected_mem_count, expected_unique_mem_count, simulate_counts, MonteCarloEstimate,
};
pub use matching::{
    ams, best_matches, empirical_mem_probabilities, read_csv, report_rows, ums,
    write_matches_csv, write_report_csv, MatchRecord, MatchRow, MemorizationReport, ReportRow,
    Tier, TierScore,
};
pub use scorer::{Scorer, Similarity};
