use super::AnalysisError;
use crate::model::service::{PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::model::*;
use crate::semantics::{Evaluator, Packet, Transport};
use chrono::{Duration, NaiveTime, Weekday};
use std::collections::BTreeSet;
use std::net::Ipv4Addr;

/// Default cap on the number of packets in a universe.
pub const DEFAULT_BOUND: u64 = 1 << 20;

/// A finite packet space given as the product of explicit per-field lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Universe {
    pub srcs: Vec<Ipv4Addr>,
    pub dsts: Vec<Ipv4Addr>,
    pub macs: Vec<Option<MacAddr>>,
    pub transports: Vec<Transport>,
    pub ifaces: Vec<String>,
    pub dirs: Vec<Direction>,
    pub times: Vec<Timestamp>,
    pub bound: u64,
}

const WEEK: [Weekday; 7] = [
    Weekday::Mon,
    Weekday::Tue,
    Weekday::Wed,
    Weekday::Thu,
    Weekday::Fri,
    Weekday::Sat,
    Weekday::Sun,
];

impl Universe {
    /// A universe with one neutral value in every field but the ones the
    /// caller fills in.
    pub fn new(srcs: Vec<Ipv4Addr>, dsts: Vec<Ipv4Addr>, transports: Vec<Transport>, ifaces: Vec<String>) -> Self {
        Universe {
            srcs,
            dsts,
            macs: vec![None],
            transports,
            ifaces,
            dirs: vec![Direction::Inbound, Direction::Outbound],
            times: vec![Timestamp::default()],
            bound: DEFAULT_BOUND,
        }
    }

    pub fn size(&self) -> u128 {
        [
            self.srcs.len(),
            self.dsts.len(),
            self.macs.len(),
            self.transports.len(),
            self.ifaces.len(),
            self.dirs.len(),
            self.times.len(),
        ]
        .iter()
        .map(|&n| n as u128)
        .product()
    }

    pub fn check_bound(&self) -> Result<(), AnalysisError> {
        let size = self.size();
        if size > u128::from(self.bound) {
            return Err(AnalysisError::UniverseTooLarge {
                size,
                bound: self.bound,
            });
        }
        Ok(())
    }

    pub fn packets(&self) -> impl Iterator<Item = Packet> + '_ {
        self.srcs.iter().flat_map(move |&src| {
            self.dsts.iter().flat_map(move |&dst| {
                self.macs.iter().flat_map(move |&src_mac| {
                    self.transports.iter().flat_map(move |&transport| {
                        self.ifaces.iter().flat_map(move |iface| {
                            self.dirs.iter().flat_map(move |&dir| {
                                self.times.iter().map(move |&time| Packet {
                                    src,
                                    dst,
                                    src_mac,
                                    transport,
                                    iface: iface.clone(),
                                    dir,
                                    time,
                                })
                            })
                        })
                    })
                })
            })
        })
    }

    /// Boundary points of every object in `db` (interval ends and the
    /// points just past them) for addresses, ports, ICMP keys, protocols and
    /// times, on every interface of `fw` in both directions.
    pub fn critical(fw: &Firewall, db: &ObjectDatabase) -> Universe {
        // One representative per atomic segment suffices for product-shaped
        // match sets; segment ends are kept too to catch off-by-one errors.
        let mut addrs = BTreeSet::from([0u32, u32::MAX]);
        let mut sports = BTreeSet::from([0u32, 1024, 65535]);
        let mut dports = BTreeSet::from([0u32, 1024, 65535]);
        let mut flags = BTreeSet::from([TcpFlags::SYN, TcpFlags::SYN | TcpFlags::ACK]);
        let mut icmp = BTreeSet::from([0u32, 8 * 256, 3 * 256 + 3]);
        let mut protos = BTreeSet::from([47u32]);
        let mut macs = BTreeSet::from([None]);
        let mut intervals = Vec::new();

        let edges = |set: &mut BTreeSet<u32>, ivs: &[(u32, u32)], max: u32| {
            for &(lo, hi) in ivs {
                set.extend([lo, hi, hi.saturating_add(1).min(max)]);
            }
        };
        for o in db.objects() {
            if let Ok(t) = db.leaf_address_terms(o) {
                if !t.ip.is_full() {
                    edges(&mut addrs, t.ip.intervals(), u32::MAX);
                }
                if !t.macs.is_empty() {
                    macs.extend(t.macs.iter().map(|m| Some(*m)));
                    macs.insert(Some(MacAddr(0x02_00_00_00_00_01)));
                }
            }
            if let Some(set) = db.loaded_table(&o.id) {
                edges(&mut addrs, set.intervals(), u32::MAX);
            }
            match &o.kind {
                ObjectKind::TcpService(s) => {
                    edges(&mut sports, &[(s.src.start.into(), s.src.end.into())], 65535);
                    edges(&mut dports, &[(s.dst.start.into(), s.dst.end.into())], 65535);
                    if let Some(f) = s.flags {
                        flags.insert(f.set.bits());
                        for bit in 0..6 {
                            if f.mask.bits() & (1 << bit) != 0 {
                                flags.insert(f.set.bits() ^ (1 << bit));
                            }
                        }
                    }
                }
                ObjectKind::UdpService(s) => {
                    edges(&mut sports, &[(s.src.start.into(), s.src.end.into())], 65535);
                    edges(&mut dports, &[(s.dst.start.into(), s.dst.end.into())], 65535);
                }
                ObjectKind::IcmpService(s) => {
                    let set = ServiceSet::icmp(s.icmp_type, s.code);
                    // Wildcard-type sets have 256 intervals; their edges are
                    // covered by the fixed samples.
                    if s.icmp_type.is_some() {
                        edges(&mut icmp, set.icmp.intervals(), 65535);
                    }
                }
                ObjectKind::IpService(s) => {
                    protos.extend([s.protocol, s.protocol.wrapping_add(1)].map(u32::from));
                }
                ObjectKind::Interval(iv) => intervals.push(iv.clone()),
                _ => {}
            }
        }
        let mut transports = Vec::new();
        for &sp in &sports {
            for &dp in &dports {
                let (sport, dport) = (sp as u16, dp as u16);
                transports.push(Transport::Udp { sport, dport });
                for &f in &flags {
                    transports.push(Transport::Tcp {
                        sport,
                        dport,
                        flags: TcpFlags(f),
                    });
                }
            }
        }
        transports.extend(icmp.iter().map(|&k| Transport::Icmp {
            icmp_type: (k / 256) as u8,
            code: (k % 256) as u8,
        }));
        transports.extend(
            protos
                .iter()
                .map(|&p| p as u8)
                .filter(|p| ![PROTO_ICMP, PROTO_TCP, PROTO_UDP].contains(p))
                .map(Transport::Other),
        );

        let addrs: Vec<Ipv4Addr> = addrs.into_iter().map(Ipv4Addr::from).collect();
        Universe {
            srcs: addrs.clone(),
            dsts: addrs,
            macs: macs.into_iter().collect(),
            transports,
            ifaces: db.interface_names(fw),
            dirs: vec![Direction::Inbound, Direction::Outbound],
            times: time_points(&intervals),
            bound: DEFAULT_BOUND,
        }
    }
}

fn time_points(intervals: &[TimeInterval]) -> Vec<Timestamp> {
    if intervals.is_empty() {
        return vec![Timestamp::default()];
    }
    let mut minutes = BTreeSet::from([0u16, 12 * 60, 1439]);
    let mut dates = BTreeSet::new();
    for iv in intervals {
        for m in [iv.from, iv.to].into_iter().flatten() {
            minutes.extend([m, m.saturating_sub(1), (m + 1).min(1439)]);
        }
        for d in [iv.start, iv.end].into_iter().flatten() {
            dates.extend([d.date() - Duration::days(1), d.date(), d.date() + Duration::days(1)]);
            let m = d.time().signed_duration_since(NaiveTime::MIN).num_minutes() as u16;
            minutes.extend([m, m.saturating_sub(1), (m + 1).min(1439)]);
        }
    }
    let mut out = Vec::new();
    for day in WEEK {
        for &m in &minutes {
            out.push(Timestamp::weekly(day, m));
        }
    }
    for d in dates {
        for &m in &minutes {
            let t = NaiveTime::from_hms_opt(u32::from(m / 60), u32::from(m % 60), 0).expect("minute of day");
            out.push(Timestamp::at(d.and_time(t)));
        }
    }
    out
}

/// First packet of `universe` on which the two rule lists disagree in their
/// (normalized) action.
pub fn find_difference(
    p1: &Policy,
    p2: &Policy,
    universe: &Universe,
    db: &ObjectDatabase,
) -> Result<Option<Packet>, AnalysisError> {
    universe.check_bound()?;
    let e1 = Evaluator::from_rules(&[], &p1.rules, db)?;
    let e2 = Evaluator::from_rules(&[], &p2.rules, db)?;
    for p in universe.packets() {
        let a1 = e1.evaluate(&p)?.action.normalized();
        let a2 = e2.evaluate(&p)?.action.normalized();
        if a1 != a2 {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

/// True iff both policies give the same action on every packet of the
/// universe. Drop by rule and default drop count as the same action.
pub fn equivalent(p1: &Policy, p2: &Policy, universe: &Universe, db: &ObjectDatabase) -> Result<bool, AnalysisError> {
    find_difference(p1, p2, universe, db).map(|d| d.is_none())
}
