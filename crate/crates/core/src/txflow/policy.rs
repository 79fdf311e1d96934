// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ReadWriteSet;
use crate::identity::OrgId;
use crate::ledger::{StateKey, WorldState};
use crate::pdc::{CollectionDef, CollectionId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("cannot parse policy {input:?}: {reason}")]
    Parse { input: String, reason: String },
    #[error("AND/OR needs at least one operand")]
    Empty,
    #[error("private write references undeclared collection {0}")]
    UnknownCollection(CollectionId),
}

/// AND/OR tree over organization principals.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyExpr {
    Org(OrgId),
    And(Vec<PolicyExpr>),
    Or(Vec<PolicyExpr>),
}

impl PolicyExpr {
    pub fn and_of<'a>(orgs: impl IntoIterator<Item = &'a OrgId>) -> PolicyExpr {
        PolicyExpr::And(orgs.into_iter().cloned().map(PolicyExpr::Org).collect())
    }

    pub fn satisfied_by(&self, orgs: &BTreeSet<OrgId>) -> bool {
        match self {
            PolicyExpr::Org(o) => orgs.contains(o),
            PolicyExpr::And(xs) => xs.iter().all(|x| x.satisfied_by(orgs)),
            PolicyExpr::Or(xs) => xs.iter().any(|x| x.satisfied_by(orgs)),
        }
    }

    /// Every principal named anywhere in the expression.
    pub fn orgs(&self) -> BTreeSet<OrgId> {
        let mut out = BTreeSet::new();
        self.collect_orgs(&mut out);
        out
    }

    fn collect_orgs(&self, out: &mut BTreeSet<OrgId>) {
        match self {
            PolicyExpr::Org(o) => {
                out.insert(o.clone());
            }
            PolicyExpr::And(xs) | PolicyExpr::Or(xs) => xs.iter().for_each(|x| x.collect_orgs(out)),
        }
    }

    /// Empty AND/OR nodes are the only way to build an unsatisfiable tree.
    pub fn check(&self) -> Result<(), PolicyError> {
        match self {
            PolicyExpr::Org(_) => Ok(()),
            PolicyExpr::And(xs) | PolicyExpr::Or(xs) => {
                if xs.is_empty() {
                    return Err(PolicyError::Empty);
                }
                xs.iter().try_for_each(PolicyExpr::check)
            }
        }
    }
}

impl fmt::Display for PolicyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, xs) = match self {
            PolicyExpr::Org(o) => return write!(f, "{o}"),
            PolicyExpr::And(xs) => ("AND", xs),
            PolicyExpr::Or(xs) => ("OR", xs),
        };
        write!(f, "{op}(")?;
        for (i, x) in xs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{x}")?;
        }
        f.write_str(")")
    }
}

impl fmt::Debug for PolicyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for PolicyExpr {
    type Err = PolicyError;

    fn from_str(input: &str) -> Result<Self, Self::Err> {
        let mut p = Parser { s: input.as_bytes(), pos: 0, input };
        let expr = p.expr()?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(p.err("trailing input"));
        }
        expr.check()?;
        Ok(expr)
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    input: &'a str,
}

impl Parser<'_> {
    fn err(&self, reason: &str) -> PolicyError {
        PolicyError::Parse {
            input: self.input.to_string(),
            reason: format!("{reason} at offset {}", self.pos),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn ident(&mut self) -> Result<&str, PolicyError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && {
            let c = self.s[self.pos];
            c.is_ascii_alphanumeric() || c == b'_' || c == b'-' || c == b'.'
        } {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected identifier"));
        }
        Ok(&self.input[start..self.pos])
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<PolicyExpr, PolicyError> {
        let name = self.ident()?.to_string();
        if !self.eat(b'(') {
            let org = OrgId::new(name).map_err(|_| self.err("empty organization"))?;
            return Ok(PolicyExpr::Org(org));
        }
        let is_and = match name.to_ascii_uppercase().as_str() {
            "AND" => true,
            "OR" => false,
            _ => return Err(self.err("expected AND or OR")),
        };
        let mut operands = Vec::new();
        if !self.eat(b')') {
            loop {
                operands.push(self.expr()?);
                if self.eat(b')') {
                    break;
                }
                if !self.eat(b',') {
                    return Err(self.err("expected ',' or ')'"));
                }
            }
        }
        Ok(if is_and {
            PolicyExpr::And(operands)
        } else {
            PolicyExpr::Or(operands)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyLevel {
    Chaincode,
    Collection,
    Key,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndorsementPolicy {
    pub expr: PolicyExpr,
    pub level: PolicyLevel,
}

impl EndorsementPolicy {
    pub fn satisfied_by(&self, orgs: &BTreeSet<OrgId>) -> bool {
        self.expr.satisfied_by(orgs)
    }
}

fn conjunction(mut exprs: Vec<PolicyExpr>) -> PolicyExpr {
    exprs.sort();
    exprs.dedup();
    if exprs.len() == 1 {
        exprs.pop().unwrap()
    } else {
        PolicyExpr::And(exprs)
    }
}

/// Looks a collection definition up first among the rwset's own writes
/// (a collection created by this transaction), then in `committed`.
pub fn find_collection(rwset: &ReadWriteSet, committed: &dyn Fn(&StateKey) -> Option<Vec<u8>>, id: &CollectionId) -> Option<CollectionDef> {
    let key = id.state_key();
    let bytes = rwset
        .writes
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.clone())
        .or_else(|| committed(&key))?;
    crate::codec::decode(&bytes).ok()
}

/// Most specific applicable policy: key-level declarations win over the
/// policies of touched collections, which win over the chaincode default.
/// Several policies at the winning level combine by conjunction.
pub fn resolve_policy_with(
    rwset: &ReadWriteSet,
    chaincode_default: &PolicyExpr,
    committed: &dyn Fn(&StateKey) -> Option<Vec<u8>>,
) -> Result<EndorsementPolicy, PolicyError> {
    if !rwset.key_policies.is_empty() {
        let exprs = rwset.key_policies.iter().map(|(_, p)| p.clone()).collect();
        return Ok(EndorsementPolicy {
            expr: conjunction(exprs),
            level: PolicyLevel::Key,
        });
    }
    if !rwset.private_writes.is_empty() {
        let ids: BTreeSet<&CollectionId> = rwset.private_writes.iter().map(|pw| &pw.collection).collect();
        let exprs = ids
            .into_iter()
            .map(|id| {
                find_collection(rwset, committed, id)
                    .map(|def| def.endorsers)
                    .ok_or(PolicyError::UnknownCollection(*id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(EndorsementPolicy {
            expr: conjunction(exprs),
            level: PolicyLevel::Collection,
        });
    }
    Ok(EndorsementPolicy {
        expr: chaincode_default.clone(),
        level: PolicyLevel::Chaincode,
    })
}

pub fn resolve_policy(
    rwset: &ReadWriteSet,
    chaincode_default: &PolicyExpr,
    state: &WorldState,
) -> Result<EndorsementPolicy, PolicyError> {
    resolve_policy_with(rwset, chaincode_default, &|k| state.get(k).map(|v| v.value.clone()))
}

/// Convenience for contract code: the policy a collection definition should
/// carry when `holders` are the orgs that already hold the value.
pub fn collection_policy(holders: &BTreeSet<OrgId>) -> PolicyExpr {
    PolicyExpr::and_of(holders)
}
