//! Script emission for iptables, pf and ipfilter, and an interpreter for the
//! emitted grammar that simulates each target's own processing model.

mod bsd;
mod iptables;

use crate::model::*;
use crate::semantics::{Evaluator, Packet, Transport, Verdict, VerdictAction};
use crate::transform::{run_pipeline, Capabilities, Lowered, TransformError};
use std::fmt;
use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("rule cannot be emitted for {target}: {message}")]
    InvariantViolation { target: Platform, message: String },
    #[error("line {line}: {message}: {text:?}")]
    UnparseableScript { line: usize, text: String, message: String },
    #[error("script is for {found}, not {expected}")]
    WrongTarget { expected: Platform, found: Platform },
    #[error("{0} has no value at simulation time")]
    Unbound(String),
}

pub fn capabilities(target: &str) -> Result<Capabilities, BackendError> {
    let p: Platform = target.parse().map_err(|_| BackendError::UnknownTarget(target.to_string()))?;
    Ok(Capabilities::for_target(p))
}

/// Where the addresses of a named table come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableDef {
    Inline(Vec<Cidr>),
    File(String),
}

/// An emitted configuration. `origins[i]` is the abstract rule that line `i`
/// came from, when known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    pub target: Platform,
    pub lines: Vec<String>,
    pub tables: BTreeMap<String, TableDef>,
    pub origins: Vec<Option<u32>>,
}

impl Script {
    fn new(target: Platform) -> Self {
        Script {
            target,
            lines: Vec::new(),
            tables: BTreeMap::new(),
            origins: Vec::new(),
        }
    }

    fn push(&mut self, line: String, origin: Option<u32>) {
        self.lines.push(line);
        self.origins.push(origin);
    }

    /// Reads back script text; rule origins are unknown.
    pub fn from_text(target: Platform, text: &str) -> Self {
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        Script {
            target,
            origins: vec![None; lines.len()],
            lines,
            tables: BTreeMap::new(),
        }
    }

    /// Newline-terminated text.
    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

pub fn emit(lowered: &Lowered) -> Result<Script, BackendError> {
    match lowered.target {
        Platform::Iptables => iptables::emit(lowered),
        Platform::Pf => bsd::emit(lowered, bsd::Dialect::Pf),
        Platform::Ipfilter => bsd::emit(lowered, bsd::Dialect::Ipf),
    }
}

/// Values the script only learns when loaded on a firewall.
#[derive(Debug, Clone, Default)]
pub struct Env {
    /// Current address of each dynamic interface.
    pub dynamic: HashMap<String, Ipv4Addr>,
    /// Contents of table files, by path as written in the script.
    pub files: HashMap<String, AddressSet>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum AddrSpec {
    Any,
    Set(AddressSet),
    Dynamic(String),
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AddrCond {
    spec: AddrSpec,
    negated: bool,
}

impl AddrCond {
    fn any() -> Self {
        AddrCond {
            spec: AddrSpec::Any,
            negated: false,
        }
    }
}

/// Match part shared by every rule form of every target.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Cond {
    dir: Option<Direction>,
    iface: Option<String>,
    proto: Option<u8>,
    src: AddrCond,
    dst: AddrCond,
    sport: Option<(u16, u16)>,
    dport: Option<(u16, u16)>,
    flags: Option<FlagMatch>,
    icmp_type: Option<u8>,
    icmp_code: Option<u8>,
    mac: Option<(MacAddr, bool)>,
    time: Option<TimeInterval>,
}

impl Default for Cond {
    fn default() -> Self {
        Cond {
            dir: None,
            iface: None,
            proto: None,
            src: AddrCond::any(),
            dst: AddrCond::any(),
            sport: None,
            dport: None,
            flags: None,
            icmp_type: None,
            icmp_code: None,
            mac: None,
            time: None,
        }
    }
}

struct Tables<'a> {
    defs: &'a HashMap<String, TableDef>,
    env: &'a Env,
}

impl Tables<'_> {
    fn test(&self, c: &AddrCond, a: Ipv4Addr) -> Result<bool, String> {
        let a32 = u32::from(a);
        let hit = match &c.spec {
            AddrSpec::Any => true,
            AddrSpec::Set(s) => s.contains(a32),
            AddrSpec::Dynamic(i) => *self.env.dynamic.get(i).ok_or_else(|| format!("address of interface {i}"))? == a,
            AddrSpec::Table(name) => match self.defs.get(name) {
                Some(TableDef::Inline(cs)) => cs.iter().any(|c| c.contains(a32)),
                Some(TableDef::File(path)) => self
                    .env
                    .files
                    .get(path)
                    .ok_or_else(|| format!("table file {path}"))?
                    .contains(a32),
                None => return Err(format!("table <{name}>")),
            },
        };
        Ok(hit != c.negated)
    }
}

fn in_range(v: u16, r: Option<(u16, u16)>) -> bool {
    r.is_none_or(|(a, b)| a <= v && v <= b)
}

impl Cond {
    /// Decided fields first: an unknown address only matters when every
    /// other field matches.
    fn test(&self, p: &Packet, t: &Tables) -> Result<bool, BackendError> {
        let known = self.dir.is_none_or(|d| d == p.dir)
            && self.iface.as_ref().is_none_or(|i| *i == p.iface)
            && self.proto.is_none_or(|n| n == p.transport.protocol())
            && self.ports_match(&p.transport)
            && self.mac.is_none_or(|(m, neg)| (p.src_mac == Some(m)) != neg)
            && self.time.as_ref().is_none_or(|iv| iv.matches(&p.time));
        if !known {
            return Ok(false);
        }
        let s = t.test(&self.src, p.src);
        let d = t.test(&self.dst, p.dst);
        match (s, d) {
            (Ok(a), Ok(b)) => Ok(a && b),
            (Ok(false), _) | (_, Ok(false)) => Ok(false),
            (Err(e), _) | (_, Err(e)) => Err(BackendError::Unbound(e)),
        }
    }

    fn ports_match(&self, t: &Transport) -> bool {
        if self.sport.is_some() || self.dport.is_some() {
            match t.ports() {
                Some((sp, dp)) if in_range(sp, self.sport) && in_range(dp, self.dport) => {}
                _ => return false,
            }
        }
        if let Some(fm) = self.flags {
            match t {
                Transport::Tcp { flags, .. } if fm.matches(*flags) => {}
                _ => return false,
            }
        }
        if self.icmp_type.is_some() || self.icmp_code.is_some() {
            match *t {
                Transport::Icmp { icmp_type, code }
                    if self.icmp_type.is_none_or(|x| x == icmp_type) && self.icmp_code.is_none_or(|x| x == code) => {}
                _ => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verb {
    Pass,
    Block,
    Reject,
    Count,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FilterLine {
    verb: Verb,
    quick: bool,
    cond: Cond,
    line: usize,
}

/// What a matching NAT line does.
#[derive(Debug, Clone, PartialEq, Eq)]
enum NatAction {
    /// Stop looking in this list without translating.
    Exempt,
    Src(Option<Ipv4Addr>, Option<u16>),
    Dst(Option<Ipv4Addr>, Option<u16>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NatLine {
    action: NatAction,
    cond: Cond,
}

/// A parsed script ready to run packets.
#[derive(Debug, Clone)]
pub struct Interpreter {
    target: Platform,
    /// Ordered NAT lists, each first-match. iptables: PREROUTING is
    /// applied before filtering and POSTROUTING after accepting.
    pre_nat: Vec<Vec<NatLine>>,
    post_nat: Vec<NatLine>,
    filter: Vec<FilterLine>,
    last_match: bool,
    /// Verdict when no line decides.
    policy: VerdictAction,
    tables: HashMap<String, TableDef>,
    origins: Vec<Option<u32>>,
}

fn parse_err(line: usize, text: &str, message: impl Into<String>) -> BackendError {
    BackendError::UnparseableScript {
        line: line + 1,
        text: text.to_string(),
        message: message.into(),
    }
}

fn apply_nat_action(a: &NatAction, p: &mut Packet) {
    let (addr, port, src) = match a {
        NatAction::Exempt => return,
        NatAction::Src(a, port) => (a, port, true),
        NatAction::Dst(a, port) => (a, port, false),
    };
    if let Some(a) = addr {
        if src {
            p.src = *a;
        } else {
            p.dst = *a;
        }
    }
    if let (Some(port), Some((sp, dp))) = (port, p.transport.ports()) {
        p.transport = if src {
            p.transport.with_ports(*port, dp)
        } else {
            p.transport.with_ports(sp, *port)
        };
    }
}

impl Interpreter {
    pub fn new(script: &Script) -> Result<Self, BackendError> {
        match script.target {
            Platform::Iptables => iptables::parse(script),
            Platform::Pf => bsd::parse(script, bsd::Dialect::Pf),
            Platform::Ipfilter => bsd::parse(script, bsd::Dialect::Ipf),
        }
    }

    fn first_nat(&self, list: &[NatLine], p: &Packet, t: &Tables) -> Result<Option<NatAction>, BackendError> {
        for l in list {
            if l.cond.test(p, t)? {
                return Ok(Some(l.action.clone()));
            }
        }
        Ok(None)
    }

    pub fn run(&self, p: &Packet, env: &Env) -> Result<Verdict, BackendError> {
        let t = Tables { defs: &self.tables, env };
        let mut pkt = p.clone();
        // Every pre-filter list matches on the original header.
        for list in &self.pre_nat {
            if let Some(a) = self.first_nat(list, p, &t)? {
                apply_nat_action(&a, &mut pkt);
            }
        }

        let origin = |line: usize| self.origins.get(line).copied().flatten();
        let mut counters: Vec<u32> = Vec::new();
        let mut decided: Option<(Verb, usize)> = None;
        for l in &self.filter {
            if !l.cond.test(&pkt, &t)? {
                continue;
            }
            if l.verb == Verb::Count {
                if let Some(o) = origin(l.line) {
                    if !counters.contains(&o) {
                        counters.push(o);
                    }
                }
                continue;
            }
            decided = Some((l.verb, l.line));
            if l.quick || !self.last_match {
                break;
            }
        }
        let (action, matched_rule) = match decided {
            Some((v, line)) => (
                match v {
                    Verb::Pass => VerdictAction::Accept,
                    Verb::Block => VerdictAction::Drop,
                    Verb::Reject => VerdictAction::Reject,
                    Verb::Count => unreachable!("count lines never decide"),
                },
                origin(line),
            ),
            None => (self.policy, None),
        };
        if action == VerdictAction::Accept {
            let before = pkt.clone();
            if let Some(a) = self.first_nat(&self.post_nat, &before, &t)? {
                apply_nat_action(&a, &mut pkt);
            }
        }
        Ok(Verdict {
            action,
            matched_rule,
            counters_hit: counters,
            egress: pkt,
        })
    }

    pub fn target(&self) -> Platform {
        self.target
    }
}

/// Parses `script` and runs one packet with no deploy-time values.
pub fn interpret(target: Platform, script: &Script, packet: &Packet) -> Result<Verdict, BackendError> {
    if script.target != target {
        return Err(BackendError::WrongTarget {
            expected: target,
            found: script.target,
        });
    }
    Interpreter::new(script)?.run(packet, &Env::default())
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Pipeline plus emission for one firewall.
pub fn compile(fw: &Firewall, target: Platform, db: &ObjectDatabase) -> Result<(Lowered, Script), CompileError> {
    let lowered = run_pipeline(fw, target, db)?;
    let script = emit(&lowered)?;
    Ok((lowered, script))
}

/// A packet on which a script and the abstract model disagree.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub packet: Packet,
    pub expected: Verdict,
    pub got: Verdict,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}: model says {} (egress {:?}, counters {:?}), script says {} (egress {:?}, counters {:?})",
            self.packet,
            self.expected,
            self.expected.observable().1,
            self.expected.counters_hit,
            self.got,
            self.got.observable().1,
            self.got.counters_hit
        )
    }
}

/// Runs every packet through both the abstract evaluator for `fw` and the
/// interpreter for `script`, and returns the first disagreement on action,
/// egress header of accepted packets, deciding rule or counters.
pub fn first_mismatch<I>(script: &Script, fw: &Firewall, db: &ObjectDatabase, packets: I, env: &Env) -> Result<Option<Mismatch>, String>
where
    I: IntoIterator<Item = Packet>,
{
    let eval = Evaluator::new(fw, db).map_err(|e| e.to_string())?;
    let interp = Interpreter::new(script).map_err(|e| e.to_string())?;
    for p in packets {
        let expected = eval.evaluate(&p).map_err(|e| e.to_string())?;
        let got = interp.run(&p, env).map_err(|e| e.to_string())?;
        if expected.observable() != got.observable()
            || expected.matched_rule != got.matched_rule
            || expected.counters_hit != got.counters_hit
        {
            return Ok(Some(Mismatch {
                packet: p,
                expected,
                got,
            }));
        }
    }
    Ok(None)
}

fn proto_name(p: u8) -> String {
    match p {
        1 => "icmp".into(),
        6 => "tcp".into(),
        17 => "udp".into(),
        n => n.to_string(),
    }
}

fn parse_proto(s: &str) -> Option<u8> {
    match s {
        "icmp" => Some(1),
        "tcp" => Some(6),
        "udp" => Some(17),
        n => n.parse().ok(),
    }
}

/// Protocol, ports, flags and ICMP fields of a service atom.
struct SrvParts {
    proto: Option<u8>,
    sport: Option<(u16, u16)>,
    dport: Option<(u16, u16)>,
    flags: Option<FlagMatch>,
    icmp: Option<(u8, Option<u8>)>,
}

fn srv_parts(s: &crate::transform::SrvAtom) -> SrvParts {
    use crate::transform::SrvAtom;
    let pr = |r: PortRange| (!r.is_any()).then_some((r.start, r.end));
    let mut out = SrvParts {
        proto: None,
        sport: None,
        dport: None,
        flags: None,
        icmp: None,
    };
    match s {
        SrvAtom::Any => {}
        SrvAtom::Tcp { src, dst, flags } => {
            out.proto = Some(6);
            out.sport = pr(*src);
            out.dport = pr(*dst);
            out.flags = *flags;
        }
        SrvAtom::Udp { src, dst } => {
            out.proto = Some(17);
            out.sport = pr(*src);
            out.dport = pr(*dst);
        }
        SrvAtom::Icmp { icmp_type, code } => {
            out.proto = Some(1);
            out.icmp = icmp_type.map(|t| (t, *code));
        }
        SrvAtom::Proto(p) => out.proto = Some(*p),
    }
    out
}

#[cfg(test)]
mod tests;
