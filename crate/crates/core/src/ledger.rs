//! Logged inequalities: each line keeps both sides so slack can be audited.

use std::fmt::Write as _;

use crate::grid::fmt17;

/// Relative size of round-off tolerated on the wrong side of a line.
pub const ROUNDOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// `lhs <= rhs`.
    Le,
    /// `lhs = rhs` up to round-off.
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerLine {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub relation: Relation,
}

impl LedgerLine {
    pub fn le(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self { name: name.into(), lhs, rhs, relation: Relation::Le }
    }

    pub fn eq(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self { name: name.into(), lhs, rhs, relation: Relation::Eq }
    }

    /// `rhs - lhs` for inequalities; minus the defect for identities.
    pub fn slack(&self) -> f64 {
        match self.relation {
            Relation::Le => self.rhs - self.lhs,
            Relation::Eq => -(self.rhs - self.lhs).abs(),
        }
    }

    pub fn holds(&self) -> bool {
        let scale = self.lhs.abs().max(self.rhs.abs());
        self.lhs.is_finite() && self.rhs.is_finite() && self.slack() >= -ROUNDOFF * scale
    }
}

/// CSV with columns `name, relation, lhs, rhs, slack, holds`.
pub fn ledger_csv(lines: &[LedgerLine]) -> String {
    let mut s = String::from("name,relation,lhs,rhs,slack,holds\n");
    for l in lines {
        let rel = match l.relation {
            Relation::Le => "le",
            Relation::Eq => "eq",
        };
        let _ = writeln!(s, "{},{},{},{},{},{}", l.name, rel, fmt17(l.lhs), fmt17(l.rhs), fmt17(l.slack()), l.holds());
    }
    s
}
