//! Rule processors: small rewrites that lower an abstract policy to
//! single-valued rules a given target can express.

mod atoms;
mod nat;

pub use atoms::{range_to_cidrs, service_atoms, set_atoms};
pub use nat::adjust_for_iptables_nat_order;

use crate::diag::Diagnostic;
use crate::model::*;
use std::fmt;
use std::net::Ipv4Addr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error("UnsupportedFeature({code}) on {target}: {message}")]
    Unsupported {
        target: Platform,
        code: &'static str,
        message: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Platform(String),
}

impl TransformError {
    fn unsupported(target: Platform, code: &'static str, origin: Option<u32>, what: impl fmt::Display) -> Self {
        let message = match origin {
            Some(p) => format!("rule {p}: {what}"),
            None => what.to_string(),
        };
        TransformError::Unsupported { target, code, message }
    }

    /// The feature code of an `Unsupported` error.
    pub fn code(&self) -> Option<&'static str> {
        match self {
            TransformError::Unsupported { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStrategy {
    First,
    LastWithQuick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultPolicy {
    Pass,
    Drop,
    Configurable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NatOrder {
    NatFirst,
    SplitDnatSnat,
}

/// Per-target feature descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub target: Platform,
    pub match_strategy: MatchStrategy,
    pub default_policy: DefaultPolicy,
    pub nat_order: NatOrder,
    pub supports_single_negation: bool,
    pub supports_group_negation: bool,
    pub supports_address_ranges: bool,
    pub supports_dynamic_iface_address: bool,
    pub supports_time: bool,
    pub supports_mac: bool,
    pub supports_address_lists: bool,
    /// Address tables read by the firewall itself when the rules load.
    pub supports_deploy_tables: bool,
    /// NAT rules that exempt traffic from later translations.
    pub supports_nat_exemption: bool,
    /// Source and destination translations in one firewall.
    pub supports_mixed_nat: bool,
}

impl Capabilities {
    pub fn for_target(target: Platform) -> Self {
        match target {
            Platform::Iptables => Capabilities {
                target,
                match_strategy: MatchStrategy::First,
                default_policy: DefaultPolicy::Configurable,
                nat_order: NatOrder::SplitDnatSnat,
                supports_single_negation: true,
                supports_group_negation: false,
                supports_address_ranges: true,
                supports_dynamic_iface_address: false,
                supports_time: true,
                supports_mac: true,
                supports_address_lists: false,
                supports_deploy_tables: false,
                supports_nat_exemption: true,
                supports_mixed_nat: false,
            },
            Platform::Pf => Capabilities {
                target,
                match_strategy: MatchStrategy::LastWithQuick,
                default_policy: DefaultPolicy::Pass,
                nat_order: NatOrder::NatFirst,
                supports_single_negation: true,
                supports_group_negation: true,
                supports_address_ranges: false,
                supports_dynamic_iface_address: true,
                supports_time: false,
                supports_mac: false,
                supports_address_lists: false,
                supports_deploy_tables: true,
                supports_nat_exemption: true,
                supports_mixed_nat: true,
            },
            Platform::Ipfilter => Capabilities {
                target,
                match_strategy: MatchStrategy::LastWithQuick,
                default_policy: DefaultPolicy::Pass,
                nat_order: NatOrder::NatFirst,
                supports_single_negation: true,
                supports_group_negation: false,
                supports_address_ranges: false,
                supports_dynamic_iface_address: true,
                supports_time: false,
                supports_mac: false,
                supports_address_lists: false,
                supports_deploy_tables: false,
                supports_nat_exemption: false,
                supports_mixed_nat: false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    Filter,
    Snat,
    Dnat,
    /// NAT rule without translation: matching packets skip later NAT rules.
    NoNat,
    /// Trailing marker for the default drop.
    DefaultPolicy,
}

/// One address value of a flat rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AddrAtom {
    Any,
    Cidr(Cidr),
    Range(u32, u32),
    /// Current address of a dynamic interface, by interface name.
    Dynamic(String),
    /// Address table loaded by the firewall at deploy time.
    Table { id: ObjectId, path: String },
    Mac(MacAddr),
    /// Several blocks, only used negated on targets with group negation.
    Set(Vec<Cidr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AddrMatch {
    pub atom: AddrAtom,
    pub negated: bool,
}

impl AddrMatch {
    pub fn any() -> Self {
        AddrMatch::pos(AddrAtom::Any)
    }

    pub fn pos(atom: AddrAtom) -> Self {
        AddrMatch { atom, negated: false }
    }

    /// IP addresses matched, when known at compile time. MAC atoms have none.
    pub fn ip_set(&self) -> Option<AddressSet> {
        let s = match &self.atom {
            AddrAtom::Any => AddressSet::full(),
            AddrAtom::Cidr(c) => AddressSet::cidr(*c),
            AddrAtom::Range(a, b) => AddressSet::range(*a, *b),
            AddrAtom::Set(cs) => cs.iter().fold(AddressSet::empty(), |s, c| s.union(&AddressSet::cidr(*c))),
            AddrAtom::Dynamic(_) | AddrAtom::Table { .. } | AddrAtom::Mac(_) => return None,
        };
        Some(if self.negated { s.complement() } else { s })
    }
}

/// One service value of a flat rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SrvAtom {
    Any,
    Tcp {
        src: PortRange,
        dst: PortRange,
        flags: Option<FlagMatch>,
    },
    Udp {
        src: PortRange,
        dst: PortRange,
    },
    Icmp {
        icmp_type: Option<u8>,
        code: Option<u8>,
    },
    Proto(u8),
}

impl SrvAtom {
    pub fn service_set(&self) -> ServiceSet {
        match self {
            SrvAtom::Any => ServiceSet::universal(),
            SrvAtom::Tcp { src, dst, flags } => ServiceSet::tcp((src.start, src.end), (dst.start, dst.end), *flags),
            SrvAtom::Udp { src, dst } => ServiceSet::udp((src.start, src.end), (dst.start, dst.end)),
            SrvAtom::Icmp { icmp_type, code } => ServiceSet::icmp(*icmp_type, *code),
            SrvAtom::Proto(p) => ServiceSet::ip_proto(*p),
        }
    }
}

/// Single-valued intermediate rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlatRule {
    /// Position of the source rule; `None` for the default-policy marker.
    pub origin: Option<u32>,
    pub kind: RuleKind,
    pub action: Action,
    /// `None` for NAT rules and the default marker.
    pub direction: Option<Direction>,
    /// `None` is any interface.
    pub iface: Option<String>,
    pub src: AddrMatch,
    pub dst: AddrMatch,
    pub srv: SrvAtom,
    pub when: Option<TimeInterval>,
    pub tsrc: Option<Ipv4Addr>,
    pub tdst: Option<Ipv4Addr>,
    pub tport: Option<PortRewrite>,
}

impl FlatRule {
    pub fn default_marker() -> Self {
        FlatRule {
            origin: None,
            kind: RuleKind::DefaultPolicy,
            action: Action::Deny,
            direction: None,
            iface: None,
            src: AddrMatch::any(),
            dst: AddrMatch::any(),
            srv: SrvAtom::Any,
            when: None,
            tsrc: None,
            tdst: None,
            tport: None,
        }
    }
}

fn fmt_addr(m: &AddrMatch) -> String {
    let a = match &m.atom {
        AddrAtom::Any => "any".to_string(),
        AddrAtom::Cidr(c) => c.to_string(),
        AddrAtom::Range(a, b) => format!("{}-{}", Ipv4Addr::from(*a), Ipv4Addr::from(*b)),
        AddrAtom::Dynamic(i) => format!("dyn({i})"),
        AddrAtom::Table { id, .. } => format!("table({id})"),
        AddrAtom::Mac(mac) => mac.to_string(),
        AddrAtom::Set(cs) => format!("{{{}}}", cs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
    };
    if m.negated {
        format!("!{a}")
    } else {
        a
    }
}

fn fmt_ports(r: PortRange) -> String {
    if r.is_single() {
        r.start.to_string()
    } else {
        format!("{}-{}", r.start, r.end)
    }
}

impl fmt::Display for SrvAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SrvAtom::Any => f.write_str("any"),
            SrvAtom::Tcp { src, dst, flags } => {
                write!(f, "tcp {}>{}", fmt_ports(*src), fmt_ports(*dst))?;
                if let Some(fl) = flags {
                    write!(f, " flags {}/{}", fl.set.to_letters(), fl.mask.to_letters())?;
                }
                Ok(())
            }
            SrvAtom::Udp { src, dst } => write!(f, "udp {}>{}", fmt_ports(*src), fmt_ports(*dst)),
            SrvAtom::Icmp { icmp_type, code } => {
                let o = |v: &Option<u8>| v.map_or("*".to_string(), |x| x.to_string());
                write!(f, "icmp {}/{}", o(icmp_type), o(code))
            }
            SrvAtom::Proto(p) => write!(f, "proto {p}"),
        }
    }
}

impl fmt::Display for FlatRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.origin {
            Some(o) => write!(f, "#{o}")?,
            None => f.write_str("#-")?,
        }
        let kind = match self.kind {
            RuleKind::Filter => self.action.as_str(),
            RuleKind::Snat => "snat",
            RuleKind::Dnat => "dnat",
            RuleKind::NoNat => "nonat",
            RuleKind::DefaultPolicy => "default",
        };
        write!(f, " {kind}")?;
        if let Some(d) = self.direction {
            write!(f, " {}", RuleDirection::from(d).as_str())?;
        }
        write!(
            f,
            " on {} {} -> {} {}",
            self.iface.as_deref().unwrap_or("*"),
            fmt_addr(&self.src),
            fmt_addr(&self.dst),
            self.srv
        )?;
        if let Some(w) = &self.when {
            write!(f, " when {w:?}")?;
        }
        if let Some(a) = self.tsrc {
            write!(f, " tsrc {a}")?;
        }
        if let Some(a) = self.tdst {
            write!(f, " tdst {a}")?;
        }
        if let Some(p) = self.tport {
            write!(f, " tport {p:?}")?;
        }
        Ok(())
    }
}

/// Output of the pipeline for one firewall and target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lowered {
    pub target: Platform,
    /// Names of the firewall's interfaces, in declaration order.
    pub interfaces: Vec<String>,
    pub filter: Vec<FlatRule>,
    pub nat: Vec<FlatRule>,
    pub warnings: Vec<Diagnostic>,
}

impl Lowered {
    /// Human-readable IR listing.
    pub fn dump(&self) -> String {
        let mut out = format!("# target {}\n# nat\n", self.target.as_str());
        for r in &self.nat {
            out.push_str(&format!("{r}\n"));
        }
        out.push_str("# filter\n");
        for r in &self.filter {
            out.push_str(&format!("{r}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Elem<T> {
    atoms: Vec<T>,
    negated: bool,
}

/// A rule between processors: elements may still hold several atoms.
#[derive(Debug, Clone)]
struct Stage {
    origin: u32,
    kind: RuleKind,
    action: Action,
    direction: Option<RuleDirection>,
    itf: Elem<Option<String>>,
    src: Elem<AddrAtom>,
    dst: Elem<AddrAtom>,
    srv: Elem<SrvAtom>,
    when: Elem<Option<TimeInterval>>,
    tsrc: Option<Ipv4Addr>,
    tdst: Option<Ipv4Addr>,
    tport: Option<PortRewrite>,
}

struct Ctx<'a> {
    caps: Capabilities,
    db: &'a ObjectDatabase,
    interfaces: Vec<String>,
    warnings: Vec<Diagnostic>,
}

impl Ctx<'_> {
    fn drop_rule(&mut self, s: &Stage, why: &str) {
        let what = if s.kind == RuleKind::Filter { "PolicyRule" } else { "NATRule" };
        self.warnings.push(Diagnostic::warning(
            "rule-dropped",
            format!("{what}[{}]", s.origin),
            format!("rule can never match ({why}) and is left out"),
        ));
    }

    fn unsupported(&self, code: &'static str, origin: Option<u32>, what: impl fmt::Display) -> TransformError {
        TransformError::unsupported(self.caps.target, code, origin, what)
    }
}

/// Runs every processor in order for `fw` compiled to `target`.
pub fn run_pipeline(fw: &Firewall, target: Platform, db: &ObjectDatabase) -> Result<Lowered, TransformError> {
    let mut ctx = Ctx {
        caps: Capabilities::for_target(target),
        db,
        interfaces: db.interface_names(fw),
        warnings: Vec::new(),
    };
    resolve_tables(fw, db)?;

    let mut filter = Vec::new();
    for r in fw.policy_rules().iter().filter(|r| !r.disabled) {
        filter.push(atoms::flatten_policy_rule(r, &ctx)?);
    }
    let mut nat = Vec::new();
    for r in fw.nat_rules().iter().filter(|r| !r.disabled) {
        nat.push(nat::flatten_nat_rule(r, &ctx)?);
    }
    nat::check_nat(&nat, &ctx)?;

    let lower = |rules: Vec<Stage>, ctx: &mut Ctx| -> Result<Vec<FlatRule>, TransformError> {
        let rules = split_directions(rules);
        let rules = split_multi_refs(rules);
        let rules = expand_ranges(rules, ctx);
        let rules = atoms::expand_negation(rules, ctx)?;
        Ok(rules.into_iter().map(into_flat).collect())
    };
    let nat_flat = lower(nat, &mut ctx)?;
    let mut filter_flat = lower(filter, &mut ctx)?;

    if target == Platform::Iptables {
        filter_flat = adjust_for_iptables_nat_order(filter_flat, fw.nat_rules(), db)?;
    }
    feature_check(filter_flat.iter().chain(&nat_flat), &ctx)?;
    filter_flat.push(FlatRule::default_marker());

    Ok(Lowered {
        target,
        interfaces: ctx.interfaces,
        filter: filter_flat,
        nat: nat_flat,
        warnings: ctx.warnings,
    })
}

/// Fails if a compile-time table reachable from the rules was never loaded.
fn resolve_tables(fw: &Firewall, db: &ObjectDatabase) -> Result<(), TransformError> {
    let elems = fw
        .policy_rules()
        .iter()
        .flat_map(|r| [&r.src, &r.dst])
        .chain(fw.nat_rules().iter().flat_map(|r| [&r.osrc, &r.odst]));
    for e in elems {
        for id in &e.refs {
            for leaf in db.leaves(id)? {
                if let ObjectKind::AddressTable {
                    load: LoadTime::Compile,
                    ..
                } = leaf.kind
                {
                    if db.loaded_table(&leaf.id).is_none() {
                        return Err(ModelError::TableNotLoaded(leaf.id.clone()).into());
                    }
                }
            }
        }
    }
    Ok(())
}

fn split_directions(rules: Vec<Stage>) -> Vec<Stage> {
    let mut out = Vec::with_capacity(rules.len() * 2);
    for r in rules {
        if r.direction == Some(RuleDirection::Both) {
            for d in [RuleDirection::Inbound, RuleDirection::Outbound] {
                out.push(Stage {
                    direction: Some(d),
                    ..r.clone()
                });
            }
        } else {
            out.push(r);
        }
    }
    out
}

/// Cartesian product over one element: a rule per atom.
fn split_on<T: Clone>(rules: Vec<Stage>, field: fn(&mut Stage) -> &mut Elem<T>) -> Vec<Stage> {
    let mut out = Vec::with_capacity(rules.len());
    for mut r in rules {
        let e = field(&mut r);
        if e.negated || e.atoms.len() <= 1 {
            out.push(r);
            continue;
        }
        let atoms = std::mem::take(&mut e.atoms);
        for a in atoms {
            let mut c = r.clone();
            field(&mut c).atoms = vec![a];
            out.push(c);
        }
    }
    out
}

fn split_multi_refs(rules: Vec<Stage>) -> Vec<Stage> {
    let rules = split_on(rules, |s| &mut s.itf);
    let rules = split_on(rules, |s| &mut s.src);
    let rules = split_on(rules, |s| &mut s.dst);
    let rules = split_on(rules, |s| &mut s.srv);
    split_on(rules, |s| &mut s.when)
}

fn expand_ranges(rules: Vec<Stage>, ctx: &Ctx) -> Vec<Stage> {
    if ctx.caps.supports_address_ranges {
        return rules;
    }
    let to_cidrs = |e: &mut Elem<AddrAtom>| {
        if e.negated {
            return;
        }
        e.atoms = e
            .atoms
            .drain(..)
            .flat_map(|a| match a {
                AddrAtom::Range(lo, hi) => range_to_cidrs(lo, hi).into_iter().map(AddrAtom::Cidr).collect(),
                a => vec![a],
            })
            .collect();
    };
    let rules = rules
        .into_iter()
        .map(|mut r| {
            to_cidrs(&mut r.src);
            to_cidrs(&mut r.dst);
            r
        })
        .collect();
    let rules = split_on(rules, |s| &mut s.src);
    split_on(rules, |s| &mut s.dst)
}

fn into_flat(s: Stage) -> FlatRule {
    let addr = |e: Elem<AddrAtom>| AddrMatch {
        atom: e.atoms.into_iter().next().expect("single atom after lowering"),
        negated: e.negated,
    };
    FlatRule {
        origin: Some(s.origin),
        kind: s.kind,
        action: s.action,
        direction: s.direction.map(|d| match d {
            RuleDirection::Outbound => Direction::Outbound,
            _ => Direction::Inbound,
        }),
        iface: s.itf.atoms.into_iter().next().flatten(),
        src: addr(s.src),
        dst: addr(s.dst),
        srv: s.srv.atoms.into_iter().next().expect("single service"),
        when: s.when.atoms.into_iter().next().flatten(),
        tsrc: s.tsrc,
        tdst: s.tdst,
        tport: s.tport,
    }
}

fn feature_check<'a>(rules: impl Iterator<Item = &'a FlatRule>, ctx: &Ctx) -> Result<(), TransformError> {
    let caps = &ctx.caps;
    for r in rules {
        if r.when.is_some() && !caps.supports_time {
            return Err(ctx.unsupported("time", r.origin, "time-interval restriction"));
        }
        for a in [&r.src, &r.dst] {
            match &a.atom {
                AddrAtom::Mac(_) if !caps.supports_mac => {
                    return Err(ctx.unsupported("mac", r.origin, "MAC address matching"))
                }
                AddrAtom::Dynamic(i) if !caps.supports_dynamic_iface_address => {
                    return Err(ctx.unsupported(
                        "dynamic-interface-address",
                        r.origin,
                        format!("no way to refer to the address of dynamic interface {i}"),
                    ))
                }
                AddrAtom::Table { id, .. } if !caps.supports_deploy_tables => {
                    return Err(ctx.unsupported(
                        "deploy-time-table",
                        r.origin,
                        format!("address table {id} is loaded at deploy time"),
                    ))
                }
                AddrAtom::Range(..) if !caps.supports_address_ranges => {
                    return Err(ctx.unsupported("address-range", r.origin, "address range left after expansion"))
                }
                AddrAtom::Set(_) if !caps.supports_group_negation => {
                    return Err(ctx.unsupported("group-negation", r.origin, "negated address group"))
                }
                _ => {}
            }
        }
    }
    Ok(())
}
