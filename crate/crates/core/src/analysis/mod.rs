//! Rule-region geometry, shadowing detection, optimization and
//! enumeration-based policy equivalence.

mod optimize;
mod universe;

pub use optimize::optimize;
pub use universe::{equivalent, find_difference, Universe, DEFAULT_BOUND};

use crate::diag::Diagnostic;
use crate::model::time::time_universe;
use crate::model::*;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("rule field {field} mixes IP and MAC addresses; its match set is not a product region")]
    NonProduct { field: &'static str },
    #[error("universe has {size} packets, above the bound of {bound}")]
    UniverseTooLarge { size: u128, bound: u64 },
}

pub const DIR_IN: u8 = 1;
pub const DIR_OUT: u8 = 2;

/// The exact match set of one rule, as a product over packet fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleRegion {
    pub src: AddressSet,
    /// Source MAC dimension; `None` stands for packets without a MAC.
    pub src_mac: FiniteSet<Option<MacAddr>>,
    pub dst: AddressSet,
    pub srv: ServiceSet,
    pub itf: FiniteSet<String>,
    /// Bit set of `DIR_IN` / `DIR_OUT`.
    pub dir: u8,
    pub when: TimeSet,
}

impl RuleRegion {
    pub fn universal() -> Self {
        RuleRegion {
            src: AddressSet::full(),
            src_mac: FiniteSet::all(),
            dst: AddressSet::full(),
            srv: ServiceSet::universal(),
            itf: FiniteSet::all(),
            dir: DIR_IN | DIR_OUT,
            when: time_universe(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
            || self.src_mac.is_empty()
            || self.dst.is_empty()
            || self.srv.is_empty()
            || self.itf.is_empty()
            || self.dir == 0
            || self.when.is_empty()
    }
}

fn direction_bits(d: RuleDirection) -> u8 {
    match d {
        RuleDirection::Inbound => DIR_IN,
        RuleDirection::Outbound => DIR_OUT,
        RuleDirection::Both => DIR_IN | DIR_OUT,
    }
}

/// IP and MAC dimensions of a Src/Dst element.
fn address_dims(
    db: &ObjectDatabase,
    e: &MatchElement,
    field: &'static str,
) -> Result<(AddressSet, FiniteSet<Option<MacAddr>>), AnalysisError> {
    let t = db.address_terms(&e.refs)?;
    if let Some((id, reason)) = t.opaque.into_iter().next() {
        return Err(ModelError::OpaqueSet { id, reason }.into());
    }
    let (ip, mac) = if t.macs.is_empty() {
        (t.ip, FiniteSet::all())
    } else if t.ip.is_empty() {
        (AddressSet::full(), FiniteSet::only(t.macs.iter().map(|m| Some(*m))))
    } else if t.ip.is_full() {
        (t.ip, FiniteSet::all())
    } else {
        return Err(AnalysisError::NonProduct { field });
    };
    Ok(if e.negated {
        // Only one of the two dimensions is restricted, so the complement
        // stays a product.
        if mac.is_all() {
            (ip.complement(), mac)
        } else {
            (ip, mac.complement())
        }
    } else {
        (ip, mac)
    })
}

pub fn rule_region(rule: &PolicyRule, db: &ObjectDatabase) -> Result<RuleRegion, AnalysisError> {
    let (src, src_mac) = address_dims(db, &rule.src, "Src")?;
    let (dst, dst_mac) = address_dims(db, &rule.dst, "Dst")?;
    // Packets carry no destination MAC: only the "no MAC" point counts.
    let dst = if dst_mac.contains(&None) { dst } else { AddressSet::empty() };
    let mut srv = db.service_set_of_refs(&rule.srv.refs)?;
    if rule.srv.negated {
        srv = srv.complement();
    }
    let mut itf = db.interface_set_of_refs(&rule.itf.refs)?;
    if rule.itf.negated {
        itf = itf.complement();
    }
    let mut when = db.time_set_of_refs(&rule.when.refs)?;
    if rule.when.negated {
        when = time_universe().difference(&when);
    }
    Ok(RuleRegion {
        src,
        src_mac,
        dst,
        srv,
        itf,
        dir: direction_bits(rule.direction),
        when,
    })
}

/// Every packet of `a` is in `b`. Exact for product regions.
pub fn region_subset(a: &RuleRegion, b: &RuleRegion) -> bool {
    a.is_empty()
        || (a.src.is_subset(&b.src)
            && a.src_mac.is_subset(&b.src_mac)
            && a.dst.is_subset(&b.dst)
            && a.srv.is_subset(&b.srv)
            && a.itf.is_subset(&b.itf)
            && a.dir & !b.dir == 0
            && a.when.is_subset(&b.when))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    Shadowing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyReport {
    pub kind: AnomalyKind,
    pub shadowing_position: u32,
    pub shadowed_position: u32,
    pub explanation: String,
}

impl fmt::Display for AnomalyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "warning: rule {} shadows rule {}: {}",
            self.shadowing_position, self.shadowed_position, self.explanation
        )
    }
}

/// Regions of the enabled rules of `rules`, with diagnostics for the ones
/// that cannot be analysed.
pub(crate) fn regions<'a>(
    rules: &'a [PolicyRule],
    db: &ObjectDatabase,
) -> (Vec<(&'a PolicyRule, Option<RuleRegion>)>, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    let out = rules
        .iter()
        .filter(|r| !r.disabled)
        .map(|r| {
            let reg = match rule_region(r, db) {
                Ok(reg) => Some(reg),
                Err(e) => {
                    diags.push(
                        Diagnostic::warning(
                            "analysis-skipped",
                            format!("PolicyRule[{}]", r.position),
                            format!("rule excluded from shadowing analysis: {e}"),
                        )
                        .with_id(&r.id),
                    );
                    None
                }
            };
            (r, reg)
        })
        .collect();
    (out, diags)
}

/// Pairwise shadowing plus warnings for rules that were skipped.
pub fn detect_shadowing_with_diagnostics(policy: &Policy, db: &ObjectDatabase) -> (Vec<AnomalyReport>, Vec<Diagnostic>) {
    let (regs, diags) = regions(&policy.rules, db);
    let mut out = Vec::new();
    for (j, (rj, reg_j)) in regs.iter().enumerate() {
        let Some(reg_j) = reg_j else { continue };
        if !rj.action.is_terminal() {
            continue;
        }
        for (ri, reg_i) in &regs[..j] {
            let Some(reg_i) = reg_i else { continue };
            if ri.action.is_terminal() && region_subset(reg_j, reg_i) {
                out.push(AnomalyReport {
                    kind: AnomalyKind::Shadowing,
                    shadowing_position: ri.position,
                    shadowed_position: rj.position,
                    explanation: format!(
                        "every packet matched by rule {} is already matched by rule {} ({}), so rule {} never takes effect",
                        rj.position,
                        ri.position,
                        ri.action.as_str(),
                        rj.position
                    ),
                });
            }
        }
    }
    (out, diags)
}

pub fn detect_shadowing(policy: &Policy, db: &ObjectDatabase) -> Vec<AnomalyReport> {
    detect_shadowing_with_diagnostics(policy, db).0
}
