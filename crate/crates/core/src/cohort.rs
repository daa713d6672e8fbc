//! Successive demographic filtering, histograms and value counts.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{VariableDecl, VariableKind};
use crate::model::{DemographicValue, SubjectRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("variable '{variable}' is {actual:?}; clause needs {expected:?}")]
    KindMismatch {
        variable: String,
        expected: VariableKind,
        actual: VariableKind,
    },
    #[error("invalid clause: {0}")]
    InvalidClause(String),
    #[error("bin count must be >= 1")]
    NoBins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Predicate {
    /// Inclusive numeric range.
    Range { lo: f64, hi: f64 },
    Categories { values: BTreeSet<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterClause {
    pub variable: String,
    #[serde(flatten)]
    pub predicate: Predicate,
}

impl FilterClause {
    pub fn range(variable: impl Into<String>, lo: f64, hi: f64) -> Result<Self, CohortError> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(CohortError::InvalidClause(format!("range [{lo}, {hi}]")));
        }
        Ok(Self {
            variable: variable.into(),
            predicate: Predicate::Range { lo, hi },
        })
    }

    pub fn categories<I, S>(variable: impl Into<String>, values: I) -> Result<Self, CohortError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let values: BTreeSet<String> = values.into_iter().map(Into::into).collect();
        if values.is_empty() {
            return Err(CohortError::InvalidClause("empty category set".into()));
        }
        Ok(Self {
            variable: variable.into(),
            predicate: Predicate::Categories { values },
        })
    }

    /// Re-checks invariants, e.g. after deserialization.
    pub fn check(&self) -> Result<(), CohortError> {
        match &self.predicate {
            Predicate::Range { lo, hi } => Self::range(&self.variable, *lo, *hi).map(|_| ()),
            Predicate::Categories { values } => {
                Self::categories(&self.variable, values.iter().cloned()).map(|_| ())
            }
        }
    }

    /// Missing values never match.
    pub fn matches(&self, record: &SubjectRecord) -> bool {
        match (&self.predicate, record.value(&self.variable)) {
            (Predicate::Range { lo, hi }, Some(DemographicValue::Numeric(v))) => lo <= v && v <= hi,
            (Predicate::Categories { values }, Some(DemographicValue::Categorical(v))) => {
                values.contains(v)
            }
            _ => false,
        }
    }

    fn required_kind(&self) -> VariableKind {
        match self.predicate {
            Predicate::Range { .. } => VariableKind::Numeric,
            Predicate::Categories { .. } => VariableKind::Categorical,
        }
    }

    pub fn validate(&self, variables: &[VariableDecl]) -> Result<(), CohortError> {
        self.check()?;
        let decl = variables
            .iter()
            .find(|v| v.name == self.variable)
            .ok_or_else(|| CohortError::UnknownVariable(self.variable.clone()))?;
        if decl.kind != self.required_kind() {
            return Err(CohortError::KindMismatch {
                variable: self.variable.clone(),
                expected: self.required_kind(),
                actual: decl.kind,
            });
        }
        Ok(())
    }
}

/// Parses `var=lo:hi` (numeric) or `var=a,b` / `var=a|b` (categorical).
impl FromStr for FilterClause {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (var, rhs) = s
            .split_once('=')
            .ok_or_else(|| CohortError::InvalidClause(format!("'{s}' lacks '='")))?;
        let var = var.trim();
        if var.is_empty() {
            return Err(CohortError::InvalidClause(format!("'{s}' lacks a variable")));
        }
        if let Some((lo, hi)) = rhs.split_once(':') {
            let parse = |x: &str| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| CohortError::InvalidClause(format!("bad number '{x}'")))
            };
            return Self::range(var, parse(lo)?, parse(hi)?);
        }
        Self::categories(
            var,
            rhs.split([',', '|']).map(str::trim).filter(|v| !v.is_empty()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortState {
    pub clauses: Vec<FilterClause>,
    /// `layer_counts[0]` is the full cohort; `layer_counts[i]` survives
    /// clauses `1..=i`.
    pub layer_counts: Vec<usize>,
    /// Final-layer ids in dataset order.
    pub subset: Vec<String>,
}

impl CohortState {
    pub fn final_count(&self) -> usize {
        *self.layer_counts.last().expect("at least one layer")
    }
}

pub fn apply_filters(
    records: &[SubjectRecord],
    variables: &[VariableDecl],
    clauses: &[FilterClause],
) -> Result<CohortState, CohortError> {
    for c in clauses {
        c.validate(variables)?;
    }
    let mut alive: Vec<&SubjectRecord> = records.iter().collect();
    let mut layer_counts = vec![alive.len()];
    for c in clauses {
        alive.retain(|r| c.matches(r));
        layer_counts.push(alive.len());
    }
    Ok(CohortState {
        clauses: clauses.to_vec(),
        layer_counts,
        subset: alive.into_iter().map(|r| r.id.clone()).collect(),
    })
}

pub fn subset_ids(state: &CohortState) -> Vec<String> {
    state.subset.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub variable: String,
    pub bins: Vec<Bin>,
    pub missing: usize,
}

/// Equal-width bins over `[min, max]`; bins are half-open except the last,
/// which is closed. Constant data yields one `[v, v]` bin.
pub fn histogram(
    records: &[SubjectRecord],
    variables: &[VariableDecl],
    variable: &str,
    bin_count: usize,
) -> Result<Histogram, CohortError> {
    let decl = variables
        .iter()
        .find(|v| v.name == variable)
        .ok_or_else(|| CohortError::UnknownVariable(variable.to_string()))?;
    if decl.kind != VariableKind::Numeric {
        return Err(CohortError::KindMismatch {
            variable: variable.to_string(),
            expected: VariableKind::Numeric,
            actual: decl.kind,
        });
    }
    if bin_count == 0 {
        return Err(CohortError::NoBins);
    }
    let values: Vec<f64> = records
        .iter()
        .filter_map(|r| r.value(variable).and_then(DemographicValue::as_f64))
        .collect();
    let missing = records.len() - values.len();
    let bins = match (
        values.iter().copied().reduce(f64::min),
        values.iter().copied().reduce(f64::max),
    ) {
        (Some(lo), Some(hi)) if lo == hi => vec![Bin {
            lo,
            hi,
            count: values.len(),
        }],
        (Some(lo), Some(hi)) => {
            let width = (hi - lo) / bin_count as f64;
            let mut bins: Vec<Bin> = (0..bin_count)
                .map(|i| Bin {
                    lo: lo + width * i as f64,
                    hi: if i + 1 == bin_count {
                        hi
                    } else {
                        lo + width * (i + 1) as f64
                    },
                    count: 0,
                })
                .collect();
            for v in values {
                let mut i = (((v - lo) / width).floor() as usize).min(bin_count - 1);
                // guard against rounding at interior edges
                while i > 0 && v < bins[i].lo {
                    i -= 1;
                }
                while i + 1 < bin_count && v >= bins[i + 1].lo {
                    i += 1;
                }
                bins[i].count += 1;
            }
            bins
        }
        _ => Vec::new(),
    };
    Ok(Histogram {
        variable: variable.to_string(),
        bins,
        missing,
    })
}

/// Counts per category for a categorical variable, plus missing.
pub fn value_counts(
    records: &[SubjectRecord],
    variables: &[VariableDecl],
    variable: &str,
) -> Result<(BTreeMap<String, usize>, usize), CohortError> {
    let decl = variables
        .iter()
        .find(|v| v.name == variable)
        .ok_or_else(|| CohortError::UnknownVariable(variable.to_string()))?;
    if decl.kind != VariableKind::Categorical {
        return Err(CohortError::KindMismatch {
            variable: variable.to_string(),
            expected: VariableKind::Categorical,
            actual: decl.kind,
        });
    }
    let mut counts = BTreeMap::new();
    let mut missing = 0;
    for r in records {
        match r.value(variable).and_then(DemographicValue::as_str) {
            Some(v) => *counts.entry(v.to_string()).or_insert(0) += 1,
            None => missing += 1,
        }
    }
    Ok((counts, missing))
}
