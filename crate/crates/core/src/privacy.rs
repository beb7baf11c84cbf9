//! Record-level differential-privacy accounting across rounds.
//!
//! If every round's release by client `i` is `(eps_q, delta_q)`-DP for any
//! fixed history of earlier rounds, the whole multi-round release is
//! `(sum eps_q, sum delta_q)`-DP. The ledger implements exactly this basic
//! composition; it does not check that the per-round mechanisms are private.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::clients::ClientId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundBudget {
    pub round: u32,
    pub epsilon: f64,
    pub delta: f64,
}

impl RoundBudget {
    pub fn new(round: u32, epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be finite and >= 0, got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::invalid("delta", format!("must lie in [0, 1], got {delta}")));
        }
        Ok(Self {
            round,
            epsilon,
            delta,
        })
    }
}

/// Per-client, value-semantic ledger: recording returns a new ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub client: ClientId,
    rounds: Vec<RoundBudget>,
}

impl PrivacyLedger {
    pub fn new(client: ClientId) -> Self {
        Self {
            client,
            rounds: Vec::new(),
        }
    }

    pub fn rounds(&self) -> &[RoundBudget] {
        &self.rounds
    }

    pub fn record_round(&self, budget: RoundBudget) -> Result<Self> {
        let budget = RoundBudget::new(budget.round, budget.epsilon, budget.delta)?;
        if let Some(last) = self.rounds.last() {
            if budget.round <= last.round {
                return Err(Error::NonMonotoneRound {
                    round: budget.round,
                    last: last.round,
                });
            }
        }
        let mut next = self.clone();
        next.rounds.push(budget);
        Ok(next)
    }

    /// Composed `(epsilon, delta)`. Delta is summed without clamping.
    pub fn total_budget(&self) -> (f64, f64) {
        self.rounds
            .iter()
            .fold((0.0, 0.0), |(e, d), b| (e + b.epsilon, d + b.delta))
    }

    /// True when the composed delta is vacuous (at least 1).
    pub fn delta_is_vacuous(&self) -> bool {
        self.total_budget().1 >= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerTotal {
    pub client: ClientId,
    pub rounds: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub delta_vacuous: bool,
}

impl From<&PrivacyLedger> for LedgerTotal {
    fn from(l: &PrivacyLedger) -> Self {
        let (epsilon, delta) = l.total_budget();
        Self {
            client: l.client,
            rounds: l.rounds.len(),
            epsilon,
            delta,
            delta_vacuous: l.delta_is_vacuous(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    client: u32,
    round: u32,
    epsilon: f64,
    delta: f64,
}

/// Parse `client,round,epsilon,delta` rows (header optional) into per-client ledgers.
///
/// Rows for one client may appear in any order; they are sorted by round
/// before recording, and a repeated round is rejected.
pub fn ledgers_from_csv(reader: impl Read) -> Result<Vec<PrivacyLedger>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut by_client: BTreeMap<u32, Vec<RoundBudget>> = BTreeMap::new();
    for (i, record) in csv.records().enumerate() {
        let line = i + 1;
        let parse_err = |message: String| Error::Parse {
            path: "<privacy csv>".into(),
            line,
            message,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if i == 0 && record.get(0).is_some_and(|f| f.parse::<u32>().is_err()) {
            continue;
        }
        let row: CsvRow = record
            .deserialize(None)
            .map_err(|e| parse_err(e.to_string()))?;
        by_client
            .entry(row.client)
            .or_default()
            .push(RoundBudget::new(row.round, row.epsilon, row.delta)?);
    }
    by_client
        .into_iter()
        .map(|(client, mut rounds)| {
            rounds.sort_by_key(|b| b.round);
            rounds
                .into_iter()
                .try_fold(PrivacyLedger::new(ClientId(client)), |l, b| l.record_round(b))
        })
        .collect()
}
