//! Object model of the abstract firewall.

mod db;
pub mod service;
pub mod sets;
pub mod time;

pub use db::{AddressTerms, DbBuilder, ObjectDatabase, PortRewrite, STANDARD_LIBRARY_ID};
pub use service::{FlagMatch, ServiceSet, TcpFlags};
pub use sets::{AddressSet, Cidr, FiniteSet, IntervalSet};
pub use time::{TimeInterval, TimeSet, Timestamp, Weekdays};

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use thiserror::Error;

/// Reserved id of the Any address / Any interface object.
pub const ANY_ADDRESS: &str = "sysid0";
/// Reserved id of the Any service object.
pub const ANY_SERVICE: &str = "sysid1";
/// Reserved id of the Any time interval object.
pub const ANY_INTERVAL: &str = "sysid2";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown object id {0:?}")]
    UnknownId(ObjectId),
    #[error("object {id:?} has no address known at compile time: {reason}")]
    OpaqueSet { id: ObjectId, reason: String },
    #[error("group {0:?} contains itself")]
    CyclicGroup(ObjectId),
    #[error("object {id:?} is a {found}, expected {expected}")]
    WrongType {
        id: ObjectId,
        expected: &'static str,
        found: &'static str,
    },
    #[error("address table {0:?} has not been loaded")]
    TableNotLoaded(ObjectId),
    #[error("duplicate object id {0:?}")]
    DuplicateId(ObjectId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(String);

impl ObjectId {
    pub fn new(s: impl Into<String>) -> Self {
        ObjectId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_any(&self) -> bool {
        matches!(self.0.as_str(), ANY_ADDRESS | ANY_SERVICE | ANY_INTERVAL)
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for ObjectId {
    fn from(s: String) -> Self {
        ObjectId(s)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        ObjectId(s.to_string())
    }
}

/// 48-bit link-layer address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MacAddr(pub u64);

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0.to_be_bytes();
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[2], b[3], b[4], b[5], b[6], b[7]
        )
    }
}

impl FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(format!("bad MAC address {s:?}"));
        }
        let mut v = 0u64;
        for p in parts {
            let b = u8::from_str_radix(p, 16).map_err(|_| format!("bad MAC address {s:?}"))?;
            v = (v << 8) | u64::from(b);
        }
        Ok(MacAddr(v))
    }
}

/// Target firewall platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Platform {
    Iptables,
    Pf,
    Ipfilter,
}

impl Platform {
    pub const ALL: [Platform; 3] = [Platform::Iptables, Platform::Pf, Platform::Ipfilter];

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Iptables => "iptables",
            Platform::Pf => "pf",
            Platform::Ipfilter => "ipfilter",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iptables" => Ok(Platform::Iptables),
            "pf" => Ok(Platform::Pf),
            "ipfilter" | "ipf" => Ok(Platform::Ipfilter),
            other => Err(format!("unsupported platform {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PortRange {
    pub start: u16,
    pub end: u16,
}

impl PortRange {
    pub const ANY: PortRange = PortRange {
        start: 0,
        end: 65535,
    };

    pub fn new(start: u16, end: u16) -> Self {
        PortRange { start, end }
    }

    pub fn single(p: u16) -> Self {
        PortRange { start: p, end: p }
    }

    pub fn is_any(&self) -> bool {
        *self == Self::ANY
    }

    pub fn is_single(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoadTime {
    Compile,
    Deploy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpService {
    pub src: PortRange,
    pub dst: PortRange,
    pub flags: Option<FlagMatch>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpService {
    pub src: PortRange,
    pub dst: PortRange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpService {
    pub icmp_type: Option<u8>,
    pub code: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpService {
    pub protocol: u8,
    pub lsrr: bool,
    pub rr: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interface {
    pub dynamic: bool,
    pub unnumbered: bool,
    /// Carried through from the source document; no meaning is assigned.
    pub unprotected: Option<bool>,
    /// Ids of embedded IPv4 objects.
    pub addresses: Vec<ObjectId>,
    /// Id of the embedded physAddress object.
    pub phys: Option<ObjectId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Accept,
    Deny,
    Reject,
    Accounting,
}

impl Action {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Action::Accounting)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Accept => "Accept",
            Action::Deny => "Deny",
            Action::Reject => "Reject",
            Action::Accounting => "Accounting",
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Accept" => Ok(Action::Accept),
            "Deny" | "Drop" => Ok(Action::Deny),
            "Reject" => Ok(Action::Reject),
            "Accounting" => Ok(Action::Accounting),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

/// Direction attribute of a policy rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleDirection {
    Inbound,
    Outbound,
    Both,
}

impl RuleDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleDirection::Inbound => "Inbound",
            RuleDirection::Outbound => "Outbound",
            RuleDirection::Both => "Both",
        }
    }

    pub fn covers(self, d: Direction) -> bool {
        match self {
            RuleDirection::Both => true,
            RuleDirection::Inbound => d == Direction::Inbound,
            RuleDirection::Outbound => d == Direction::Outbound,
        }
    }
}

impl FromStr for RuleDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Inbound" => Ok(RuleDirection::Inbound),
            "Outbound" => Ok(RuleDirection::Outbound),
            "Both" => Ok(RuleDirection::Both),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

/// Direction of an actual packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Inbound,
    Outbound,
}

impl From<Direction> for RuleDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Inbound => RuleDirection::Inbound,
            Direction::Outbound => RuleDirection::Outbound,
        }
    }
}

/// One rule field: a list of references, optionally negated as a whole.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MatchElement {
    pub refs: Vec<ObjectId>,
    pub negated: bool,
}

impl MatchElement {
    pub fn new<I, S>(refs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ObjectId>,
    {
        MatchElement {
            refs: refs.into_iter().map(Into::into).collect(),
            negated: false,
        }
    }

    pub fn any_address() -> Self {
        Self::new([ANY_ADDRESS])
    }

    pub fn any_service() -> Self {
        Self::new([ANY_SERVICE])
    }

    pub fn any_interval() -> Self {
        Self::new([ANY_INTERVAL])
    }

    pub fn negate(mut self) -> Self {
        self.negated = !self.negated;
        self
    }

    /// True for a non-negated element containing a wildcard reference.
    pub fn is_any(&self) -> bool {
        !self.negated && self.refs.iter().any(ObjectId::is_any)
    }

    /// Same refs (ignoring order and duplicates) and same negation.
    pub fn same_as(&self, o: &MatchElement) -> bool {
        use std::collections::BTreeSet;
        self.negated == o.negated
            && self.refs.iter().collect::<BTreeSet<_>>() == o.refs.iter().collect::<BTreeSet<_>>()
    }
}

impl From<ObjectId> for MatchElement {
    fn from(id: ObjectId) -> Self {
        MatchElement {
            refs: vec![id],
            negated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub id: ObjectId,
    pub position: u32,
    pub action: Action,
    pub direction: RuleDirection,
    pub disabled: bool,
    pub comment: Option<String>,
    pub src: MatchElement,
    pub dst: MatchElement,
    pub srv: MatchElement,
    pub itf: MatchElement,
    pub when: MatchElement,
}

impl PolicyRule {
    /// A rule matching everything, with the given action.
    pub fn any(id: impl Into<ObjectId>, position: u32, action: Action) -> Self {
        PolicyRule {
            id: id.into(),
            position,
            action,
            direction: RuleDirection::Both,
            disabled: false,
            comment: None,
            src: MatchElement::any_address(),
            dst: MatchElement::any_address(),
            srv: MatchElement::any_service(),
            itf: MatchElement::any_address(),
            when: MatchElement::any_interval(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub id: ObjectId,
    /// Sorted by position.
    pub rules: Vec<PolicyRule>,
}

impl Policy {
    pub fn new(id: impl Into<ObjectId>, mut rules: Vec<PolicyRule>) -> Self {
        rules.sort_by_key(|r| r.position);
        Policy {
            id: id.into(),
            rules,
        }
    }

    /// Renumbers positions 0, 1, 2, ... in current order.
    pub fn renumber(&mut self) {
        for (i, r) in self.rules.iter_mut().enumerate() {
            r.position = i as u32;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NatRule {
    pub id: ObjectId,
    pub position: u32,
    pub disabled: bool,
    pub comment: Option<String>,
    pub osrc: MatchElement,
    pub odst: MatchElement,
    pub osrv: MatchElement,
    /// `None` keeps the original value.
    pub tsrc: Option<ObjectId>,
    pub tdst: Option<ObjectId>,
    pub tsrv: Option<ObjectId>,
    pub when: MatchElement,
}

impl NatRule {
    pub fn any(id: impl Into<ObjectId>, position: u32) -> Self {
        NatRule {
            id: id.into(),
            position,
            disabled: false,
            comment: None,
            osrc: MatchElement::any_address(),
            odst: MatchElement::any_address(),
            osrv: MatchElement::any_service(),
            tsrc: None,
            tdst: None,
            tsrv: None,
            when: MatchElement::any_interval(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Nat {
    pub id: ObjectId,
    pub rules: Vec<NatRule>,
}

impl Nat {
    pub fn new(id: impl Into<ObjectId>, mut rules: Vec<NatRule>) -> Self {
        rules.sort_by_key(|r| r.position);
        Nat {
            id: id.into(),
            rules,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Firewall {
    /// Platform name as written; see [`Firewall::platform`].
    pub platform: String,
    pub host_os: String,
    pub interfaces: Vec<ObjectId>,
    pub policy: Option<Policy>,
    pub nat: Option<Nat>,
}

impl Firewall {
    pub fn platform(&self) -> Result<Platform, String> {
        self.platform.parse()
    }

    pub fn policy_rules(&self) -> &[PolicyRule] {
        self.policy.as_ref().map_or(&[], |p| &p.rules)
    }

    pub fn nat_rules(&self) -> &[NatRule] {
        self.nat.as_ref().map_or(&[], |n| &n.rules)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObjectKind {
    AnyAddress,
    AnyService,
    AnyInterval,
    Network { address: Ipv4Addr, netmask: Ipv4Addr },
    Ipv4 { address: Ipv4Addr, netmask: Ipv4Addr },
    AddressRange { start: Ipv4Addr, end: Ipv4Addr },
    AddressTable { path: String, load: LoadTime },
    PhysAddress(MacAddr),
    IpService(IpService),
    TcpService(TcpService),
    UdpService(UdpService),
    IcmpService(IcmpService),
    Interval(TimeInterval),
    Host { interfaces: Vec<ObjectId> },
    Firewall(Box<Firewall>),
    Interface(Interface),
    Group { members: Vec<ObjectId> },
}

/// Broad category used for typed groups and rule-field checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Address,
    Service,
    Interval,
}

impl ObjectKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            ObjectKind::AnyAddress => "AnyNetwork",
            ObjectKind::AnyService => "AnyIPService",
            ObjectKind::AnyInterval => "AnyInterval",
            ObjectKind::Network { .. } => "Network",
            ObjectKind::Ipv4 { .. } => "IPv4",
            ObjectKind::AddressRange { .. } => "AddressRange",
            ObjectKind::AddressTable { .. } => "AddressTable",
            ObjectKind::PhysAddress(_) => "physAddress",
            ObjectKind::IpService(_) => "IPService",
            ObjectKind::TcpService(_) => "TCPService",
            ObjectKind::UdpService(_) => "UDPService",
            ObjectKind::IcmpService(_) => "ICMPService",
            ObjectKind::Interval(_) => "Interval",
            ObjectKind::Host { .. } => "Host",
            ObjectKind::Firewall(_) => "Firewall",
            ObjectKind::Interface(_) => "Interface",
            ObjectKind::Group { .. } => "Group",
        }
    }

    /// `None` for groups, whose category comes from their members.
    pub fn category(&self) -> Option<Category> {
        match self {
            ObjectKind::AnyService
            | ObjectKind::IpService(_)
            | ObjectKind::TcpService(_)
            | ObjectKind::UdpService(_)
            | ObjectKind::IcmpService(_) => Some(Category::Service),
            ObjectKind::AnyInterval | ObjectKind::Interval(_) => Some(Category::Interval),
            ObjectKind::Group { .. } => None,
            _ => Some(Category::Address),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Object {
    pub id: ObjectId,
    pub name: String,
    pub comment: Option<String>,
    /// Enclosing object for embedded definitions (interfaces, their addresses).
    pub parent: Option<ObjectId>,
    pub kind: ObjectKind,
}

impl Object {
    pub fn new(id: impl Into<ObjectId>, name: impl Into<String>, kind: ObjectKind) -> Self {
        Object {
            id: id.into(),
            name: name.into(),
            comment: None,
            parent: None,
            kind,
        }
    }

    pub fn as_firewall(&self) -> Option<&Firewall> {
        match &self.kind {
            ObjectKind::Firewall(fw) => Some(fw),
            _ => None,
        }
    }

    pub fn as_interface(&self) -> Option<&Interface> {
        match &self.kind {
            ObjectKind::Interface(i) => Some(i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Library {
    pub id: ObjectId,
    pub name: String,
    pub comment: Option<String>,
    /// Top-level objects in document order.
    pub objects: Vec<ObjectId>,
}
