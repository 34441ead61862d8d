//! Communication metering, counted in transmitted floats.

use std::collections::BTreeMap;
use std::fmt;

/// A length-`d` vector moving between server and client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PayloadItem {
    /// `W^{t-1}`.
    GlobalModel,
    /// `W^{t-2}`.
    PrevGlobalModel,
    /// Server-computed `(W^{t-2} - W^{t-1}) / eta`.
    GlobalDirection,
    /// SCAFFOLD global control variate `c`.
    GlobalControlVariate,
    /// FedCurv `sum_j I_j` over peers.
    FisherSum,
    /// FedCurv `sum_j I_j * W_j` over peers.
    FisherWeightedSum,
    /// `W_k^t`.
    LocalModel,
    /// SCAFFOLD client control variate `c_k`.
    LocalControlVariate,
    /// FedCurv client diagonal Fisher `I_k`.
    LocalFisher,
}

impl PayloadItem {
    pub fn name(self) -> &'static str {
        match self {
            PayloadItem::GlobalModel => "global_model",
            PayloadItem::PrevGlobalModel => "prev_global_model",
            PayloadItem::GlobalDirection => "global_direction",
            PayloadItem::GlobalControlVariate => "global_control_variate",
            PayloadItem::FisherSum => "fisher_sum",
            PayloadItem::FisherWeightedSum => "fisher_weighted_sum",
            PayloadItem::LocalModel => "local_model",
            PayloadItem::LocalControlVariate => "local_control_variate",
            PayloadItem::LocalFisher => "local_fisher",
        }
    }
}

impl fmt::Display for PayloadItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Float counts itemized by component.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Traffic {
    pub items: BTreeMap<PayloadItem, u64>,
}

impl Traffic {
    pub fn add(&mut self, item: PayloadItem, floats: u64) {
        *self.items.entry(item).or_insert(0) += floats;
    }

    pub fn total(&self) -> u64 {
        self.items.values().sum()
    }

    pub fn get(&self, item: PayloadItem) -> u64 {
        self.items.get(&item).copied().unwrap_or(0)
    }

    fn absorb(&mut self, other: &Traffic) {
        for (&k, &v) in &other.items {
            self.add(k, v);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundTraffic {
    pub round: usize,
    pub s2c: Traffic,
    pub c2s: Traffic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommLedger {
    dim: u64,
    rounds: Vec<RoundTraffic>,
    cumulative_s2c: Traffic,
    cumulative_c2s: Traffic,
}

impl CommLedger {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim as u64,
            rounds: Vec::new(),
            cumulative_s2c: Traffic::default(),
            cumulative_c2s: Traffic::default(),
        }
    }

    pub fn dim(&self) -> u64 {
        self.dim
    }

    pub fn begin_round(&mut self, round: usize) {
        self.rounds.push(RoundTraffic {
            round,
            ..Default::default()
        });
    }

    fn current(&mut self) -> &mut RoundTraffic {
        self.rounds
            .last_mut()
            .expect("begin_round is called before metering")
    }

    pub fn send(&mut self, items: &[PayloadItem]) {
        let d = self.dim;
        for &item in items {
            self.current().s2c.add(item, d);
            self.cumulative_s2c.add(item, d);
        }
    }

    pub fn receive(&mut self, items: &[PayloadItem]) {
        let d = self.dim;
        for &item in items {
            self.current().c2s.add(item, d);
            self.cumulative_c2s.add(item, d);
        }
    }

    pub fn rounds(&self) -> &[RoundTraffic] {
        &self.rounds
    }

    pub fn round(&self, round: usize) -> Option<&RoundTraffic> {
        self.rounds.iter().find(|r| r.round == round)
    }

    pub fn cumulative_s2c(&self) -> &Traffic {
        &self.cumulative_s2c
    }

    pub fn cumulative_c2s(&self) -> &Traffic {
        &self.cumulative_c2s
    }

    /// Recomputes the cumulative totals from the per-round entries.
    pub fn recount(&self) -> (Traffic, Traffic) {
        let mut s2c = Traffic::default();
        let mut c2s = Traffic::default();
        for r in &self.rounds {
            s2c.absorb(&r.s2c);
            c2s.absorb(&r.c2s);
        }
        (s2c, c2s)
    }
}

/// One row of [`ledger_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub round: usize,
    pub s2c_floats: u64,
    pub c2s_floats: u64,
}

/// Per-round S2C/C2S float counts.
pub fn ledger_report(ledger: &CommLedger) -> Vec<LedgerRow> {
    ledger
        .rounds
        .iter()
        .map(|r| LedgerRow {
            round: r.round,
            s2c_floats: r.s2c.total(),
            c2s_floats: r.c2s.total(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_multiples_of_d_and_conserved() {
        let mut ledger = CommLedger::new(7);
        for t in 1..=3 {
            ledger.begin_round(t);
            for _ in 0..4 {
                ledger.send(&[PayloadItem::GlobalModel, PayloadItem::PrevGlobalModel]);
                ledger.receive(&[PayloadItem::LocalModel]);
            }
        }
        let report = ledger_report(&ledger);
        assert_eq!(report.len(), 3);
        assert!(report
            .iter()
            .all(|r| r.s2c_floats == 8 * 7 && r.c2s_floats == 4 * 7));
        let (s2c, c2s) = ledger.recount();
        assert_eq!(&s2c, ledger.cumulative_s2c());
        assert_eq!(&c2s, ledger.cumulative_c2s());
        assert_eq!(s2c.get(PayloadItem::PrevGlobalModel), 3 * 4 * 7);
        assert_eq!(s2c.total() % 7, 0);
    }
}
