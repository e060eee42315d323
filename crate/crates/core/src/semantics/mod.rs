//! The abstract processing model: NAT first, then first-match filtering
//! with accounting continuation and a default drop.

mod packet;

pub use packet::{Packet, PacketParseError, Transport};

use crate::model::time::time_set_contains;
use crate::model::*;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerdictAction {
    Accept,
    Drop,
    Reject,
    /// No terminal rule matched.
    DefaultDrop,
}

impl VerdictAction {
    pub fn from_action(a: Action) -> Option<Self> {
        match a {
            Action::Accept => Some(VerdictAction::Accept),
            Action::Deny => Some(VerdictAction::Drop),
            Action::Reject => Some(VerdictAction::Reject),
            Action::Accounting => None,
        }
    }

    /// Drop by rule and by default are indistinguishable on the wire.
    pub fn normalized(self) -> Self {
        match self {
            VerdictAction::DefaultDrop => VerdictAction::Drop,
            a => a,
        }
    }
}

impl fmt::Display for VerdictAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictAction::Accept => "Accept",
            VerdictAction::Drop => "Deny",
            VerdictAction::Reject => "Reject",
            VerdictAction::DefaultDrop => "DefaultDrop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub action: VerdictAction,
    /// Position of the deciding rule; `None` iff the default policy applied.
    pub matched_rule: Option<u32>,
    /// Positions of matching accounting rules, in order.
    pub counters_hit: Vec<u32>,
    /// The packet after NAT.
    pub egress: Packet,
}

impl Verdict {
    /// Action and, for accepted packets, the header that leaves the firewall.
    /// This is what an observer outside the firewall can tell apart.
    pub fn observable(&self) -> (VerdictAction, Option<&Packet>) {
        let a = self.action.normalized();
        (a, (a == VerdictAction::Accept).then_some(&self.egress))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.matched_rule {
            Some(p) => write!(f, "{} (rule {p})", self.action),
            None => write!(f, "{}", self.action),
        }
    }
}

/// Three-valued match result; `Unknown` carries the opaque member.
enum Tri {
    Yes,
    No,
    Unknown(ObjectId, String),
}

impl Tri {
    fn from_bool(b: bool) -> Tri {
        if b {
            Tri::Yes
        } else {
            Tri::No
        }
    }

    fn negate_if(self, neg: bool) -> Tri {
        match (self, neg) {
            (Tri::Yes, true) => Tri::No,
            (Tri::No, true) => Tri::Yes,
            (t, _) => t,
        }
    }
}

#[derive(Debug, Clone)]
struct AddrMatcher {
    ip: AddressSet,
    macs: BTreeSet<MacAddr>,
    opaque: Option<(ObjectId, String)>,
    negated: bool,
}

impl AddrMatcher {
    fn new(db: &ObjectDatabase, e: &MatchElement) -> Result<Self, ModelError> {
        let AddressTerms { ip, macs, opaque } = db.address_terms(&e.refs)?;
        Ok(AddrMatcher {
            ip,
            macs,
            opaque: opaque.into_iter().next(),
            negated: e.negated,
        })
    }

    fn test(&self, addr: std::net::Ipv4Addr, mac: Option<MacAddr>) -> Tri {
        let hit = self.ip.contains(u32::from(addr)) || mac.is_some_and(|m| self.macs.contains(&m));
        let t = match (&self.opaque, hit) {
            (_, true) => Tri::Yes,
            (None, false) => Tri::No,
            (Some((id, why)), false) => Tri::Unknown(id.clone(), why.clone()),
        };
        t.negate_if(self.negated)
    }
}

#[derive(Debug, Clone)]
struct SrvMatcher {
    set: ServiceSet,
    negated: bool,
}

impl SrvMatcher {
    fn new(db: &ObjectDatabase, e: &MatchElement) -> Result<Self, ModelError> {
        Ok(SrvMatcher {
            set: db.service_set_of_refs(&e.refs)?,
            negated: e.negated,
        })
    }

    fn test(&self, t: &Transport) -> bool {
        service_contains(&self.set, t) != self.negated
    }
}

pub fn service_contains(set: &ServiceSet, t: &Transport) -> bool {
    match *t {
        Transport::Tcp { sport, dport, flags } => set.contains_tcp(sport, dport, flags),
        Transport::Udp { sport, dport } => set.contains_udp(sport, dport),
        Transport::Icmp { icmp_type, code } => set.contains_icmp(icmp_type, code),
        Transport::Other(p) => set.contains_proto(p),
    }
}

#[derive(Debug, Clone)]
struct TimeMatcher {
    set: Option<TimeSet>,
    negated: bool,
}

impl TimeMatcher {
    fn new(db: &ObjectDatabase, e: &MatchElement) -> Result<Self, ModelError> {
        // Skip building the set for the common Any case.
        let set = if e.refs.iter().any(ObjectId::is_any) {
            None
        } else {
            Some(db.time_set_of_refs(&e.refs)?)
        };
        Ok(TimeMatcher { set, negated: e.negated })
    }

    fn test(&self, ts: &Timestamp) -> bool {
        self.set.as_ref().is_none_or(|s| time_set_contains(s, ts)) != self.negated
    }
}

#[derive(Debug, Clone)]
struct CompiledRule {
    position: u32,
    action: Action,
    direction: RuleDirection,
    src: AddrMatcher,
    dst: AddrMatcher,
    srv: SrvMatcher,
    itf: FiniteSet<String>,
    when: TimeMatcher,
}

fn combine(parts: impl IntoIterator<Item = Tri>) -> Result<bool, ModelError> {
    let mut unknown = None;
    for t in parts {
        match t {
            Tri::No => return Ok(false),
            Tri::Yes => {}
            Tri::Unknown(id, reason) => {
                unknown.get_or_insert(ModelError::OpaqueSet { id, reason });
            }
        }
    }
    match unknown {
        Some(e) => Err(e),
        None => Ok(true),
    }
}

impl CompiledRule {
    fn new(db: &ObjectDatabase, r: &PolicyRule) -> Result<Self, ModelError> {
        let mut itf = db.interface_set_of_refs(&r.itf.refs)?;
        if r.itf.negated {
            itf = itf.complement();
        }
        Ok(CompiledRule {
            position: r.position,
            action: r.action,
            direction: r.direction,
            src: AddrMatcher::new(db, &r.src)?,
            dst: AddrMatcher::new(db, &r.dst)?,
            srv: SrvMatcher::new(db, &r.srv)?,
            itf,
            when: TimeMatcher::new(db, &r.when)?,
        })
    }

    fn matches(&self, p: &Packet) -> Result<bool, ModelError> {
        combine([
            Tri::from_bool(self.direction.covers(p.dir)),
            Tri::from_bool(self.itf.contains(&p.iface)),
            Tri::from_bool(self.srv.test(&p.transport)),
            Tri::from_bool(self.when.test(&p.time)),
            self.src.test(p.src, p.src_mac),
            self.dst.test(p.dst, None),
        ])
    }
}

#[derive(Debug, Clone)]
struct CompiledNat {
    osrc: AddrMatcher,
    odst: AddrMatcher,
    osrv: SrvMatcher,
    when: TimeMatcher,
    tsrc: Option<u32>,
    tdst: Option<u32>,
    tsrv: Option<PortRewrite>,
}

impl CompiledNat {
    fn new(db: &ObjectDatabase, r: &NatRule) -> Result<Self, ModelError> {
        Ok(CompiledNat {
            osrc: AddrMatcher::new(db, &r.osrc)?,
            odst: AddrMatcher::new(db, &r.odst)?,
            osrv: SrvMatcher::new(db, &r.osrv)?,
            when: TimeMatcher::new(db, &r.when)?,
            tsrc: r.tsrc.as_ref().map(|t| db.single_address_of(t)).transpose()?,
            tdst: r.tdst.as_ref().map(|t| db.single_address_of(t)).transpose()?,
            tsrv: r.tsrv.as_ref().map(|t| db.port_rewrite_of(t)).transpose()?,
        })
    }

    fn matches(&self, p: &Packet) -> Result<bool, ModelError> {
        combine([
            Tri::from_bool(self.osrv.test(&p.transport)),
            Tri::from_bool(self.when.test(&p.time)),
            self.osrc.test(p.src, p.src_mac),
            self.odst.test(p.dst, None),
        ])
    }

    fn rewrite(&self, p: &Packet) -> Packet {
        let mut out = p.clone();
        if let Some(a) = self.tsrc {
            out.src = a.into();
        }
        if let Some(a) = self.tdst {
            out.dst = a.into();
        }
        if let Some(rw) = self.tsrv {
            if let Some((sp, dp)) = p.transport.ports() {
                if p.transport.protocol() == rw.protocol {
                    out.transport = p
                        .transport
                        .with_ports(rw.src_port.unwrap_or(sp), rw.dst_port.unwrap_or(dp));
                }
            }
        }
        out
    }
}

/// A firewall's NAT and policy rules compiled for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Evaluator {
    nat: Vec<CompiledNat>,
    rules: Vec<CompiledRule>,
}

impl Evaluator {
    pub fn new(fw: &Firewall, db: &ObjectDatabase) -> Result<Self, ModelError> {
        Self::from_rules(fw.nat_rules(), fw.policy_rules(), db)
    }

    pub fn from_rules(nat: &[NatRule], policy: &[PolicyRule], db: &ObjectDatabase) -> Result<Self, ModelError> {
        let mut nat: Vec<&NatRule> = nat.iter().filter(|r| !r.disabled).collect();
        nat.sort_by_key(|r| r.position);
        let mut rules: Vec<&PolicyRule> = policy.iter().filter(|r| !r.disabled).collect();
        rules.sort_by_key(|r| r.position);
        Ok(Evaluator {
            nat: nat.into_iter().map(|r| CompiledNat::new(db, r)).collect::<Result<_, _>>()?,
            rules: rules.into_iter().map(|r| CompiledRule::new(db, r)).collect::<Result<_, _>>()?,
        })
    }

    pub fn apply_nat(&self, p: &Packet) -> Result<Packet, ModelError> {
        for r in &self.nat {
            if r.matches(p)? {
                return Ok(r.rewrite(p));
            }
        }
        Ok(p.clone())
    }

    pub fn evaluate(&self, p: &Packet) -> Result<Verdict, ModelError> {
        let egress = self.apply_nat(p)?;
        let mut counters_hit = Vec::new();
        for r in &self.rules {
            if r.matches(&egress)? {
                match VerdictAction::from_action(r.action) {
                    Some(action) => {
                        return Ok(Verdict {
                            action,
                            matched_rule: Some(r.position),
                            counters_hit,
                            egress,
                        })
                    }
                    None => counters_hit.push(r.position),
                }
            }
        }
        Ok(Verdict {
            action: VerdictAction::DefaultDrop,
            matched_rule: None,
            counters_hit,
            egress,
        })
    }
}

/// Rewrites `packet` by the first matching enabled NAT rule, or returns it
/// unchanged. Matching uses the original header for every field.
pub fn apply_nat(rules: &[NatRule], packet: &Packet, db: &ObjectDatabase) -> Result<Packet, ModelError> {
    Evaluator::from_rules(rules, &[], db)?.apply_nat(packet)
}

pub fn match_rule(rule: &PolicyRule, packet: &Packet, db: &ObjectDatabase) -> Result<bool, ModelError> {
    CompiledRule::new(db, rule)?.matches(packet)
}

pub fn evaluate(fw: &Firewall, packet: &Packet, db: &ObjectDatabase) -> Result<Verdict, ModelError> {
    Evaluator::new(fw, db)?.evaluate(packet)
}
