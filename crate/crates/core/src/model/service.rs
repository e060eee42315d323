//! Service match sets.

use super::sets::{Cell, CellSet, IntervalSet};
use std::fmt;

pub const PORT_MAX: u32 = 65535;
/// Keys for ICMP are `type * 256 + code`.
pub const ICMP_KEY_MAX: u32 = 65535;
pub const PROTO_MAX: u32 = 255;
/// Every combination of the six TCP flags.
pub const ALL_FLAG_COMBOS: u64 = u64::MAX;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// TCP flag bits in header order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
    pub const ALL: u8 = 0x3f;

    const NAMES: [(u8, &'static str, char); 6] = [
        (Self::SYN, "SYN", 'S'),
        (Self::ACK, "ACK", 'A'),
        (Self::FIN, "FIN", 'F'),
        (Self::RST, "RST", 'R'),
        (Self::PSH, "PSH", 'P'),
        (Self::URG, "URG", 'U'),
    ];

    pub fn bits(self) -> u8 {
        self.0 & Self::ALL
    }

    pub fn is_empty(self) -> bool {
        self.bits() == 0
    }

    /// Parses `SYN,ACK` style lists. The empty string and `NONE` give no flags.
    pub fn parse_list(s: &str) -> Result<Self, String> {
        let mut bits = 0;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("NONE") {
                continue;
            }
            if part.eq_ignore_ascii_case("ALL") {
                bits |= Self::ALL;
                continue;
            }
            let (b, _, _) = Self::NAMES
                .iter()
                .find(|(_, n, _)| n.eq_ignore_ascii_case(part))
                .ok_or_else(|| format!("unknown TCP flag {part:?}"))?;
            bits |= b;
        }
        Ok(TcpFlags(bits))
    }

    /// `SYN,ACK`; `NONE` when empty.
    pub fn to_list(self) -> String {
        if self.is_empty() {
            return "NONE".to_string();
        }
        Self::NAMES
            .iter()
            .filter(|(b, _, _)| self.0 & b != 0)
            .map(|(_, n, _)| *n)
            .collect::<Vec<_>>()
            .join(",")
    }

    /// pf/ipfilter single-letter form, e.g. `SA`.
    pub fn to_letters(self) -> String {
        Self::NAMES
            .iter()
            .filter(|(b, _, _)| self.0 & b != 0)
            .map(|(_, _, c)| *c)
            .collect()
    }

    pub fn parse_letters(s: &str) -> Result<Self, String> {
        let mut bits = 0;
        for ch in s.chars() {
            let (b, _, _) = Self::NAMES
                .iter()
                .find(|(_, _, c)| *c == ch)
                .ok_or_else(|| format!("unknown TCP flag letter {ch:?}"))?;
            bits |= b;
        }
        Ok(TcpFlags(bits))
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_list())
    }
}

/// Match on TCP flags: `(packet_flags & mask) == set`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlagMatch {
    pub mask: TcpFlags,
    pub set: TcpFlags,
}

impl FlagMatch {
    pub fn matches(&self, flags: TcpFlags) -> bool {
        flags.bits() & self.mask.bits() == self.set.bits()
    }

    /// The combinations of all six flags admitted by this match, as a bitmap
    /// indexed by flag byte.
    pub fn combos(&self) -> u64 {
        (0u8..64)
            .filter(|&c| self.matches(TcpFlags(c)))
            .fold(0u64, |acc, c| acc | (1u64 << c))
    }
}

/// A cell of the (source port × destination port × TCP flag combination) space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PortCell {
    pub src: IntervalSet,
    pub dst: IntervalSet,
    pub flags: u64,
}

impl PortCell {
    pub fn full() -> Self {
        PortCell {
            src: IntervalSet::full(PORT_MAX),
            dst: IntervalSet::full(PORT_MAX),
            flags: ALL_FLAG_COMBOS,
        }
    }

    pub fn contains(&self, sport: u16, dport: u16, flags: TcpFlags) -> bool {
        self.flags & (1u64 << flags.bits()) != 0
            && self.src.contains(u32::from(sport))
            && self.dst.contains(u32::from(dport))
    }
}

impl Cell for PortCell {
    fn is_empty(&self) -> bool {
        self.src.is_empty() || self.dst.is_empty() || self.flags == 0
    }

    fn intersect(&self, o: &Self) -> Self {
        PortCell {
            src: self.src.intersect(&o.src),
            dst: self.dst.intersect(&o.dst),
            flags: self.flags & o.flags,
        }
    }

    fn subtract(&self, o: &Self) -> Vec<Self> {
        if self.intersect(o).is_empty() {
            return vec![self.clone()];
        }
        let src_in = self.src.intersect(&o.src);
        let dst_in = self.dst.intersect(&o.dst);
        [
            PortCell {
                src: self.src.difference(&o.src),
                dst: self.dst.clone(),
                flags: self.flags,
            },
            PortCell {
                src: src_in.clone(),
                dst: self.dst.difference(&o.dst),
                flags: self.flags,
            },
            PortCell {
                src: src_in,
                dst: dst_in,
                flags: self.flags & !o.flags,
            },
        ]
        .into_iter()
        .filter(|c| !c.is_empty())
        .collect()
    }
}

/// Canonical service set, split by protocol family.
///
/// `ip` holds protocol numbers other than ICMP, TCP and UDP; those three
/// always go through their dedicated components.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ServiceSet {
    pub tcp: CellSet<PortCell>,
    pub udp: CellSet<PortCell>,
    pub icmp: IntervalSet,
    pub ip: IntervalSet,
}

fn ip_universe() -> IntervalSet {
    IntervalSet::full(PROTO_MAX).difference(&IntervalSet::from_intervals([
        (1, 1),
        (6, 6),
        (17, 17),
    ]))
}

impl ServiceSet {
    pub fn empty() -> Self {
        ServiceSet::default()
    }

    pub fn universal() -> Self {
        ServiceSet {
            tcp: CellSet::from_cell(PortCell::full()),
            udp: CellSet::from_cell(PortCell::full()),
            icmp: IntervalSet::full(ICMP_KEY_MAX),
            ip: ip_universe(),
        }
    }

    pub fn tcp(src: (u16, u16), dst: (u16, u16), flags: Option<FlagMatch>) -> Self {
        ServiceSet {
            tcp: CellSet::from_cell(PortCell {
                src: IntervalSet::range(src.0.into(), src.1.into()),
                dst: IntervalSet::range(dst.0.into(), dst.1.into()),
                flags: flags.map_or(ALL_FLAG_COMBOS, |f| f.combos()),
            }),
            ..Self::default()
        }
    }

    pub fn udp(src: (u16, u16), dst: (u16, u16)) -> Self {
        ServiceSet {
            udp: CellSet::from_cell(PortCell {
                src: IntervalSet::range(src.0.into(), src.1.into()),
                dst: IntervalSet::range(dst.0.into(), dst.1.into()),
                flags: ALL_FLAG_COMBOS,
            }),
            ..Self::default()
        }
    }

    /// `None` for type or code means any value.
    pub fn icmp(icmp_type: Option<u8>, code: Option<u8>) -> Self {
        let icmp = match (icmp_type, code) {
            (None, None) => IntervalSet::full(ICMP_KEY_MAX),
            (Some(t), None) => {
                let base = u32::from(t) * 256;
                IntervalSet::range(base, base + 255)
            }
            (Some(t), Some(c)) => IntervalSet::single(u32::from(t) * 256 + u32::from(c)),
            (None, Some(c)) => {
                IntervalSet::from_intervals((0..256u32).map(|t| (t * 256 + u32::from(c), t * 256 + u32::from(c))))
            }
        };
        ServiceSet {
            icmp,
            ..Self::default()
        }
    }

    /// A bare IP protocol number. TCP, UDP and ICMP numbers map to the full
    /// component of that protocol.
    pub fn ip_proto(proto: u8) -> Self {
        match proto {
            PROTO_TCP => ServiceSet::tcp((0, 65535), (0, 65535), None),
            PROTO_UDP => ServiceSet::udp((0, 65535), (0, 65535)),
            PROTO_ICMP => ServiceSet::icmp(None, None),
            p => ServiceSet {
                ip: IntervalSet::single(p.into()),
                ..Self::default()
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tcp.is_empty() && self.udp.is_empty() && self.icmp.is_empty() && self.ip.is_empty()
    }

    pub fn is_universal(&self) -> bool {
        Self::universal().is_subset(self)
    }

    pub fn union(&self, o: &Self) -> Self {
        ServiceSet {
            tcp: self.tcp.union(&o.tcp),
            udp: self.udp.union(&o.udp),
            icmp: self.icmp.union(&o.icmp),
            ip: self.ip.union(&o.ip),
        }
    }

    pub fn intersect(&self, o: &Self) -> Self {
        ServiceSet {
            tcp: self.tcp.intersect(&o.tcp),
            udp: self.udp.intersect(&o.udp),
            icmp: self.icmp.intersect(&o.icmp),
            ip: self.ip.intersect(&o.ip),
        }
    }

    pub fn difference(&self, o: &Self) -> Self {
        ServiceSet {
            tcp: self.tcp.difference(&o.tcp),
            udp: self.udp.difference(&o.udp),
            icmp: self.icmp.difference(&o.icmp),
            ip: self.ip.difference(&o.ip),
        }
    }

    pub fn complement(&self) -> Self {
        Self::universal().difference(self)
    }

    pub fn is_subset(&self, o: &Self) -> bool {
        self.tcp.is_subset(&o.tcp)
            && self.udp.is_subset(&o.udp)
            && self.icmp.is_subset(&o.icmp)
            && self.ip.is_subset(&o.ip)
    }

    pub fn set_eq(&self, o: &Self) -> bool {
        self.is_subset(o) && o.is_subset(self)
    }

    pub fn contains_tcp(&self, sport: u16, dport: u16, flags: TcpFlags) -> bool {
        self.tcp.cells().iter().any(|c| c.contains(sport, dport, flags))
    }

    pub fn contains_udp(&self, sport: u16, dport: u16) -> bool {
        self.udp.cells().iter().any(|c| c.contains(sport, dport, TcpFlags(0)))
    }

    pub fn contains_icmp(&self, icmp_type: u8, code: u8) -> bool {
        self.icmp.contains(u32::from(icmp_type) * 256 + u32::from(code))
    }

    pub fn contains_proto(&self, proto: u8) -> bool {
        self.ip.contains(proto.into())
    }
}
