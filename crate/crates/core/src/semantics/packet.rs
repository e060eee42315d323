use crate::model::service::{PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::model::time::{format_minute, parse_minute};
use crate::model::{Direction, MacAddr, TcpFlags, Timestamp};
use chrono::{NaiveDate, NaiveDateTime, Weekday};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transport {
    Tcp { sport: u16, dport: u16, flags: TcpFlags },
    Udp { sport: u16, dport: u16 },
    Icmp { icmp_type: u8, code: u8 },
    /// Any other IP protocol, by number.
    Other(u8),
}

impl Transport {
    pub fn protocol(&self) -> u8 {
        match self {
            Transport::Tcp { .. } => PROTO_TCP,
            Transport::Udp { .. } => PROTO_UDP,
            Transport::Icmp { .. } => PROTO_ICMP,
            Transport::Other(p) => *p,
        }
    }

    pub fn ports(&self) -> Option<(u16, u16)> {
        match *self {
            Transport::Tcp { sport, dport, .. } | Transport::Udp { sport, dport } => Some((sport, dport)),
            _ => None,
        }
    }

    pub fn with_ports(self, sport: u16, dport: u16) -> Self {
        match self {
            Transport::Tcp { flags, .. } => Transport::Tcp { sport, dport, flags },
            Transport::Udp { .. } => Transport::Udp { sport, dport },
            other => other,
        }
    }
}

/// A simulated packet header as seen by the firewall.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Packet {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_mac: Option<MacAddr>,
    pub transport: Transport,
    pub iface: String,
    pub dir: Direction,
    pub time: Timestamp,
}

impl Packet {
    pub fn new(src: Ipv4Addr, dst: Ipv4Addr, transport: Transport, iface: &str, dir: Direction) -> Self {
        Packet {
            src,
            dst,
            src_mac: None,
            transport,
            iface: iface.to_string(),
            dir,
            time: Timestamp::default(),
        }
    }

    pub fn udp(src: Ipv4Addr, dst: Ipv4Addr, sport: u16, dport: u16, iface: &str, dir: Direction) -> Self {
        Self::new(src, dst, Transport::Udp { sport, dport }, iface, dir)
    }

    pub fn tcp(src: Ipv4Addr, dst: Ipv4Addr, sport: u16, dport: u16, iface: &str, dir: Direction) -> Self {
        let flags = TcpFlags(TcpFlags::SYN);
        Self::new(src, dst, Transport::Tcp { sport, dport, flags }, iface, dir)
    }

    /// Parses a packet literal, using `now` for any time fields left out.
    pub fn parse_literal(s: &str, now: NaiveDateTime) -> Result<Packet, PacketParseError> {
        parse_literal(s, now)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad packet literal: {0}")]
pub struct PacketParseError(pub String);

fn bad(msg: impl Into<String>) -> PacketParseError {
    PacketParseError(msg.into())
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, PacketParseError> {
    v.parse().map_err(|_| bad(format!("{key}={v} is not a valid number")))
}

fn parse_literal(s: &str, now: NaiveDateTime) -> Result<Packet, PacketParseError> {
    let mut fields = std::collections::BTreeMap::new();
    for tok in s.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {tok:?}")))?;
        if fields.insert(k, v).is_some() {
            return Err(bad(format!("{k} given twice")));
        }
    }
    let mut take = |k: &str| fields.remove(k);
    fn req<'a>(v: Option<&'a str>, k: &str) -> Result<&'a str, PacketParseError> {
        v.ok_or_else(|| bad(format!("missing {k}=")))
    }
    let ip = |v: &str, k: &str| v.parse::<Ipv4Addr>().map_err(|_| bad(format!("{k}={v} is not an IPv4 address")));

    let proto = req(take("proto"), "proto")?;
    let src = ip(req(take("src"), "src")?, "src")?;
    let dst = ip(req(take("dst"), "dst")?, "dst")?;
    let iface = req(take("iface"), "iface")?.to_string();
    let dir = match req(take("dir"), "dir")? {
        "in" | "inbound" | "Inbound" => Direction::Inbound,
        "out" | "outbound" | "Outbound" => Direction::Outbound,
        v => return Err(bad(format!("dir must be in or out, got {v:?}"))),
    };
    let sport = take("sport").map(|v| num::<u16>("sport", v)).transpose()?;
    let dport = take("dport").map(|v| num::<u16>("dport", v)).transpose()?;
    let flags = take("flags");
    let icmp_type = take("type").map(|v| num::<u8>("type", v)).transpose()?;
    let code = take("code").map(|v| num::<u8>("code", v)).transpose()?;
    let transport = match proto {
        "tcp" => {
            let flags = match flags {
                None => TcpFlags(TcpFlags::SYN),
                Some(f) if f.contains(',') || f.len() > 6 || f.eq_ignore_ascii_case("none") => {
                    TcpFlags::parse_list(f).map_err(bad)?
                }
                Some(f) => TcpFlags::parse_letters(f)
                    .or_else(|_| TcpFlags::parse_list(f))
                    .map_err(bad)?,
            };
            Transport::Tcp {
                sport: sport.unwrap_or(0),
                dport: dport.unwrap_or(0),
                flags,
            }
        }
        "udp" => Transport::Udp {
            sport: sport.unwrap_or(0),
            dport: dport.unwrap_or(0),
        },
        "icmp" => Transport::Icmp {
            icmp_type: icmp_type.unwrap_or(0),
            code: code.unwrap_or(0),
        },
        other => {
            let p: u8 = num("proto", other)?;
            match p {
                PROTO_TCP | PROTO_UDP | PROTO_ICMP => {
                    return Err(bad(format!("use proto=tcp, udp or icmp instead of {p}")))
                }
                _ => Transport::Other(p),
            }
        }
    };
    if !matches!(transport, Transport::Tcp { .. } | Transport::Udp { .. }) && (sport.is_some() || dport.is_some()) {
        return Err(bad("ports only apply to tcp and udp"));
    }
    if !matches!(transport, Transport::Tcp { .. }) && flags.is_some() {
        return Err(bad("flags only apply to tcp"));
    }
    if !matches!(transport, Transport::Icmp { .. }) && (icmp_type.is_some() || code.is_some()) {
        return Err(bad("type and code only apply to icmp"));
    }
    let src_mac = take("mac")
        .map(|v| v.parse::<MacAddr>().map_err(bad))
        .transpose()?;

    let date = take("date");
    let day = take("day");
    let time = take("time");
    let minute = time.map(|t| parse_minute(t).map_err(bad)).transpose()?;
    let timestamp = match (date, day) {
        (Some(_), Some(_)) => return Err(bad("give either date= or day=, not both")),
        (Some(d), None) => {
            let d = NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|_| bad(format!("date={d} is not YYYY-MM-DD")))?;
            let m = u32::from(minute.unwrap_or(0));
            Timestamp::at(d.and_hms_opt(m / 60, m % 60, 0).expect("valid minute"))
        }
        (None, Some(d)) => {
            let wd: Weekday = d.parse().map_err(|_| bad(format!("day={d} is not a weekday")))?;
            Timestamp::weekly(wd, minute.unwrap_or(0))
        }
        (None, None) => {
            let now = Timestamp::at(now);
            match minute {
                Some(m) => Timestamp::weekly(now.weekday, m),
                None => now,
            }
        }
    };
    if let Some(k) = fields.keys().next() {
        return Err(bad(format!("unknown field {k:?}")));
    }
    Ok(Packet {
        src,
        dst,
        src_mac,
        transport,
        iface,
        dir,
        time: timestamp,
    })
}

impl FromStr for Packet {
    type Err = PacketParseError;

    /// Missing time fields default to the current local time.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_literal(s, chrono::Local::now().naive_local())
    }
}

impl fmt::Display for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let proto = match self.transport {
            Transport::Tcp { .. } => "tcp".to_string(),
            Transport::Udp { .. } => "udp".to_string(),
            Transport::Icmp { .. } => "icmp".to_string(),
            Transport::Other(p) => p.to_string(),
        };
        write!(f, "proto={proto} src={} dst={}", self.src, self.dst)?;
        match self.transport {
            Transport::Tcp { sport, dport, flags } => {
                write!(f, " sport={sport} dport={dport} flags={}", flags.to_list())?
            }
            Transport::Udp { sport, dport } => write!(f, " sport={sport} dport={dport}")?,
            Transport::Icmp { icmp_type, code } => write!(f, " type={icmp_type} code={code}")?,
            Transport::Other(_) => {}
        }
        if let Some(m) = self.src_mac {
            write!(f, " mac={m}")?;
        }
        let dir = match self.dir {
            Direction::Inbound => "in",
            Direction::Outbound => "out",
        };
        write!(f, " iface={} dir={dir}", self.iface)?;
        match self.time.datetime {
            Some(dt) => write!(f, " date={} time={}", dt.format("%Y-%m-%d"), format_minute(self.time.minute)),
            None => write!(f, " day={} time={}", self.time.weekday, format_minute(self.time.minute)),
        }
    }
}
