//! Shared fixtures for the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod criteria;

use chrono::NaiveDate;
use fwcomp::analysis::Universe;
use fwcomp::backends::Env;
use fwcomp::fwbxml;
use fwcomp::model::{Firewall, ObjectDatabase};
use fwcomp::semantics::{Packet, Transport};
use rand::seq::IndexedRandom;
use rand::Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus")
}

pub fn corpus_path(name: &str) -> PathBuf {
    corpus_dir().join(format!("{name}.fwb"))
}

/// Every `.fwb` file of the corpus, sorted by name.
pub fn corpus_files() -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "fwb"))
        .collect();
    v.sort();
    v
}

pub fn stem(p: &Path) -> String {
    p.file_stem().unwrap().to_string_lossy().into_owned()
}

/// Parses `text` and loads its compile-time tables from the corpus directory.
pub fn load_text(text: &str) -> ObjectDatabase {
    let db = fwbxml::parse(text).unwrap_or_else(|e| panic!("{e}"));
    fwbxml::load_tables(&db, &corpus_dir()).unwrap_or_else(|e| panic!("{e}"))
}

pub fn load(path: &Path) -> ObjectDatabase {
    load_text(&std::fs::read_to_string(path).unwrap())
}

pub fn only_fw(db: &ObjectDatabase) -> &Firewall {
    let mut it = db.firewalls();
    let (_, fw) = it.next().expect("a firewall");
    assert!(it.next().is_none(), "expected exactly one firewall");
    fw
}

/// A corpus firewall as compiled, plus a fully static copy for the model and
/// the runtime values the compiled script needs.
pub struct Bound {
    pub compile_db: ObjectDatabase,
    pub oracle_db: ObjectDatabase,
    pub env: Env,
}

/// Gives every dynamic interface a fixed address and turns deploy-time
/// tables into compile-time ones, so the model can judge the packets the
/// script sees with the same values bound.
pub fn bind(path: &Path) -> Bound {
    let text = std::fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let mut env = Env::default();
    let mut edits: Vec<(std::ops::Range<usize>, String)> = Vec::new();
    let mut next = 1u8;
    for n in doc.descendants().filter(|n| n.is_element()) {
        let truthy = |a: &str| n.attribute(a).is_some_and(|v| v.eq_ignore_ascii_case("true"));
        match n.tag_name().name() {
            "Interface" if truthy("dyn") => {
                let name = n.attribute("name").unwrap();
                let id = n.attribute("id").unwrap();
                let a = Ipv4Addr::new(100, 64, 0, next);
                next += 1;
                env.dynamic.insert(name.to_string(), a);
                let mut s = format!(r#"<Interface id="{id}" name="{name}">"#);
                write!(
                    s,
                    r#"<IPv4 id="{id}-bound" name="{name}:bound" address="{a}" netmask="255.255.255.255"/>"#
                )
                .unwrap();
                for c in n.children().filter(|c| c.is_element()) {
                    s.push_str(&text[c.range()]);
                }
                s.push_str("</Interface>");
                edits.push((n.range(), s));
            }
            "AddressTable" if n.attribute("load") == Some("deploy") => {
                let p = n.attribute("path").unwrap();
                let set = fwbxml::load_address_table(&corpus_dir().join(p)).unwrap();
                env.files.insert(p.to_string(), set);
                let orig = &text[n.range()];
                edits.push((n.range(), orig.replacen(r#"load="deploy""#, r#"load="compile""#, 1)));
            }
            _ => {}
        }
    }
    let mut oracle = text.clone();
    edits.sort_by_key(|(r, _)| std::cmp::Reverse(r.start));
    for (r, s) in edits {
        oracle.replace_range(r, &s);
    }
    Bound {
        compile_db: load_text(&text),
        oracle_db: load_text(&oracle),
        env,
    }
}

/// Critical universe of the oracle firewall, allowed to grow to `bound`.
pub fn universe_for(db: &ObjectDatabase, bound: u64) -> Universe {
    let mut u = Universe::critical(only_fw(db), db);
    u.bound = bound;
    u.check_bound().unwrap_or_else(|e| panic!("{e}"));
    u
}

/// Fixed clock for packet literals.
pub fn now() -> chrono::NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 3, 6).unwrap().and_hms_opt(12, 0, 0).unwrap()
}

pub fn packet(lit: &str) -> Packet {
    Packet::parse_literal(lit, now()).unwrap_or_else(|e| panic!("{lit}: {e}"))
}

/// One hand-checked packet against one corpus firewall.
pub struct Case {
    pub file: &'static str,
    pub packet: &'static str,
    /// `Verdict` as displayed, e.g. `Accept (rule 2)` or `DefaultDrop`.
    pub verdict: &'static str,
    pub counters: &'static [u32],
    /// Expected header after NAT; `None` means unchanged.
    pub egress: Option<&'static str>,
}

const fn case(file: &'static str, packet: &'static str, verdict: &'static str, counters: &'static [u32]) -> Case {
    Case {
        file,
        packet,
        verdict,
        counters,
        egress: None,
    }
}

const fn nat(
    packet: &'static str,
    verdict: &'static str,
    counters: &'static [u32],
    egress: Option<&'static str>,
) -> Case {
    Case {
        file: "nat_chain",
        packet,
        verdict,
        counters,
        egress,
    }
}

pub const CASES: &[Case] = &[
    // first match, accounting continuation, negation, disabled rule
    case("basic", "proto=tcp src=5.5.5.5 dst=192.168.1.10 sport=4000 dport=80 iface=eth1 dir=in", "Accept (rule 2)", &[]),
    case("basic", "proto=tcp src=192.168.1.5 dst=192.168.1.10 sport=4000 dport=22 iface=eth0 dir=in", "Deny (rule 1)", &[0]),
    case("basic", "proto=tcp src=5.5.5.5 dst=192.168.1.10 sport=4000 dport=80 iface=eth1 dir=out", "DefaultDrop", &[3]),
    case("basic", "proto=tcp src=5.5.5.5 dst=192.168.1.10 sport=4000 dport=80 iface=eth0 dir=in", "DefaultDrop", &[3]),
    case("basic", "proto=udp src=5.5.5.5 dst=8.8.8.8 sport=4000 dport=53 iface=eth0 dir=in", "Accept (rule 4)", &[]),
    case("basic", "proto=udp src=5.5.5.5 dst=1.2.3.4 sport=4000 dport=53 iface=eth0 dir=in", "DefaultDrop", &[]),
    case("basic", "proto=udp src=5.5.5.5 dst=10.20.30.40 sport=4000 dport=53 iface=eth0 dir=in", "DefaultDrop", &[]),
    case("basic", "proto=udp src=1.2.3.4 dst=1.2.3.5 sport=4000 dport=53 iface=eth0 dir=in", "Accept (rule 4)", &[]),
    case("basic", "proto=tcp src=1.2.3.4 dst=9.9.9.9 sport=4000 dport=25 iface=eth1 dir=in", "Reject (rule 5)", &[]),
    case("basic", "proto=tcp src=1.2.3.4 dst=192.168.1.10 sport=4000 dport=80 iface=eth1 dir=in", "Accept (rule 2)", &[]),
    case("basic", "proto=udp src=9.9.9.9 dst=9.9.9.8 sport=4000 dport=1000 iface=eth0 dir=out", "Accept (rule 6)", &[]),
    case("basic", "proto=tcp src=9.9.9.9 dst=9.9.9.8 sport=4000 dport=80 iface=eth0 dir=out", "DefaultDrop", &[]),
    case("basic", "proto=udp src=9.9.9.9 dst=9.9.9.8 sport=4000 dport=1000 iface=eth1 dir=out", "DefaultDrop", &[]),
    case("basic", "proto=udp src=192.168.1.5 dst=8.8.8.8 sport=4000 dport=53 iface=eth1 dir=out", "Accept (rule 4)", &[0]),
    case("basic", "proto=icmp src=192.168.1.5 dst=9.9.9.9 type=8 iface=eth0 dir=in", "DefaultDrop", &[0]),
    case("basic", "proto=tcp src=192.168.1.5 dst=192.168.1.10 sport=4000 dport=22 iface=eth0 dir=out", "Deny (rule 1)", &[0]),
    case("basic", "proto=icmp src=192.168.1.5 dst=192.168.1.10 type=0 iface=eth0 dir=out", "Accept (rule 6)", &[0, 3]),
    // NAT first, first-match among NAT rules, untouched fields preserved
    nat(
        "proto=tcp src=192.168.1.5 dst=8.8.8.8 sport=1234 dport=80 iface=eth1 dir=out",
        "Accept (rule 1)",
        &[],
        Some("proto=tcp src=203.0.113.1 dst=8.8.8.8 sport=1234 dport=80 iface=eth1 dir=out"),
    ),
    nat("proto=tcp src=192.168.1.7 dst=8.8.8.8 sport=1234 dport=80 iface=eth1 dir=out", "DefaultDrop", &[2], None),
    nat("proto=tcp src=192.168.1.7 dst=8.8.8.8 sport=1234 dport=80 iface=eth0 dir=out", "Accept (rule 3)", &[2], None),
    nat(
        "proto=tcp src=5.5.5.5 dst=203.0.113.1 sport=4000 dport=80 iface=eth1 dir=in",
        "Accept (rule 0)",
        &[],
        Some("proto=tcp src=5.5.5.5 dst=192.168.1.10 sport=4000 dport=8080 iface=eth1 dir=in"),
    ),
    nat("proto=tcp src=5.5.5.5 dst=203.0.113.1 sport=4000 dport=22 iface=eth1 dir=in", "DefaultDrop", &[], None),
    nat("proto=udp src=5.5.5.5 dst=203.0.113.1 sport=4000 dport=80 iface=eth1 dir=in", "DefaultDrop", &[], None),
    nat(
        "proto=tcp src=192.168.1.5 dst=203.0.113.1 sport=1234 dport=80 iface=eth0 dir=out",
        "Accept (rule 1)",
        &[],
        Some("proto=tcp src=203.0.113.1 dst=203.0.113.1 sport=1234 dport=80 iface=eth0 dir=out"),
    ),
    nat("proto=tcp src=10.0.0.1 dst=9.9.9.9 sport=4000 dport=8080 iface=eth1 dir=in", "DefaultDrop", &[], None),
    // the listing firewall
    case("listing", "proto=udp src=1.1.1.1 dst=10.86.81.7 sport=50 dport=91 iface=if0 dir=in", "Deny (rule 0)", &[]),
    case("listing", "proto=udp src=1.1.1.1 dst=10.86.81.7 sport=70 dport=92 iface=if1 dir=out", "Deny (rule 0)", &[]),
    case("listing", "proto=udp src=1.1.1.1 dst=10.86.81.7 sport=29 dport=91 iface=if0 dir=in", "DefaultDrop", &[]),
    case("listing", "proto=udp src=1.1.1.1 dst=10.86.81.7 sport=71 dport=90 iface=if0 dir=in", "DefaultDrop", &[]),
    case("listing", "proto=tcp src=1.1.1.1 dst=10.86.81.7 sport=50 dport=91 iface=if0 dir=in", "DefaultDrop", &[]),
    case("listing", "proto=udp src=1.1.1.1 dst=10.86.82.1 sport=50 dport=91 iface=if0 dir=in", "DefaultDrop", &[]),
    // negated elements: neither A nor B
    case("negation", "proto=tcp src=9.9.9.9 dst=1.2.3.4 sport=4000 dport=80 iface=eth0 dir=in", "Accept (rule 3)", &[]),
    case("negation", "proto=tcp src=9.9.9.9 dst=10.20.30.40 sport=4000 dport=80 iface=eth0 dir=in", "Accept (rule 3)", &[]),
    case("negation", "proto=tcp src=9.9.9.9 dst=1.2.3.5 sport=4000 dport=80 iface=eth0 dir=in", "Accept (rule 0)", &[]),
    case("negation", "proto=tcp src=172.16.1.1 dst=1.2.3.4 sport=4000 dport=80 iface=eth1 dir=in", "Accept (rule 3)", &[]),
    case("negation", "proto=tcp src=9.9.9.9 dst=1.2.3.4 sport=4000 dport=80 iface=eth1 dir=in", "Deny (rule 1)", &[]),
    case("negation", "proto=udp src=9.9.9.9 dst=5.5.5.5 sport=4000 dport=53 iface=eth0 dir=out", "Accept (rule 2)", &[]),
    case("negation", "proto=udp src=9.9.9.9 dst=5.5.5.5 sport=4000 dport=53 iface=eth1 dir=out", "Deny (rule 1)", &[]),
    case("negation", "proto=tcp src=172.16.1.1 dst=5.5.5.5 sport=4000 dport=80 iface=eth0 dir=out", "DefaultDrop", &[]),
];

/// Runs one case; `Err` describes the first difference.
pub fn check_case(c: &Case, dbs: &mut HashMap<&'static str, ObjectDatabase>) -> Result<(), String> {
    let db = dbs.entry(c.file).or_insert_with(|| load(&corpus_path(c.file)));
    let p = packet(c.packet);
    let v = fwcomp::semantics::evaluate(only_fw(db), &p, db).map_err(|e| e.to_string())?;
    let want_egress = c.egress.map(packet).unwrap_or_else(|| p.clone());
    if v.to_string() != c.verdict || v.counters_hit != c.counters || v.egress != want_egress {
        return Err(format!(
            "{} / {}: expected {} counters {:?} egress {}, got {} counters {:?} egress {}",
            c.file, c.packet, c.verdict, c.counters, want_egress, v, v.counters_hit, v.egress
        ));
    }
    Ok(())
}

/// Shape of the random policies.
pub struct Shape {
    /// First address of the window and its size as a prefix length.
    pub base: u32,
    pub prefix: u8,
    pub ports: [u16; 8],
    pub rules: std::ops::RangeInclusive<usize>,
}

pub fn cidr_str(a: u32, prefix: u8) -> String {
    let mask = if prefix == 0 { 0 } else { u32::MAX << (32 - prefix) };
    format!(r#"address="{}" netmask="{}""#, Ipv4Addr::from(a & mask), Ipv4Addr::from(mask))
}

/// A random firewall `rnd` on interfaces eth0/eth1 whose objects live inside
/// the window of `shape` and whose services use its ports.
pub fn random_fwb(rng: &mut impl Rng, shape: &Shape) -> String {
    let size = 1u32 << (32 - shape.prefix);
    let pick = |rng: &mut dyn rand::RngCore| shape.base + rng.random_range(0..size);
    let mut objs = String::new();
    let mut addr_ids = vec!["sysid0".to_string()];
    for i in 0..5 {
        let id = format!("a{i}");
        let line = match rng.random_range(0..3) {
            0 => format!(r#"<IPv4 id="{id}" name="{id}" {}/>"#, cidr_str(pick(rng), 32)),
            1 => {
                let p = rng.random_range(shape.prefix..=31);
                format!(r#"<Network id="{id}" name="{id}" {}/>"#, cidr_str(pick(rng), p))
            }
            _ => {
                let (a, b) = (pick(rng), pick(rng));
                format!(
                    r#"<AddressRange id="{id}" name="{id}" start="{}" end="{}"/>"#,
                    Ipv4Addr::from(a.min(b)),
                    Ipv4Addr::from(a.max(b))
                )
            }
        };
        objs.push_str(&line);
        objs.push('\n');
        addr_ids.push(id);
    }
    writeln!(objs, r#"<Group id="g0" name="g0"><ObjectRef ref="a0"/><ObjectRef ref="a1"/></Group>"#).unwrap();
    addr_ids.push("g0".into());

    let mut srv_ids = vec!["sysid1".to_string()];
    for i in 0..4 {
        let id = format!("s{i}");
        let a = *shape.ports.choose(rng).unwrap();
        let b = *shape.ports.choose(rng).unwrap();
        let (lo, hi) = if i == 0 { (a, a) } else { (a.min(b), a.max(b)) };
        let el = if i == 3 { "UDPService" } else { "TCPService" };
        writeln!(objs, r#"<{el} id="{id}" name="{id}" dst_range_start="{lo}" dst_range_end="{hi}"/>"#).unwrap();
        srv_ids.push(id);
    }
    writeln!(objs, r#"<ICMPService id="s4" name="s4" type="8" code="-1"/>"#).unwrap();
    srv_ids.push("s4".into());

    let itf_ids = ["sysid0", "gw-eth0", "gw-eth1"];
    let n = rng.random_range(shape.rules.clone());
    let mut rules = String::new();
    for pos in 0..n {
        let action = ["Accept", "Deny", "Reject", "Accept", "Deny", "Accounting"].choose(rng).unwrap();
        let dir = ["Both", "Both", "Inbound", "Outbound"].choose(rng).unwrap();
        let el = |tag: &str, refel: &str, ids: &[String], neg_p: f64, rng: &mut dyn rand::RngCore| {
            let k = if rng.random_bool(0.2) { 2 } else { 1 };
            let mut chosen: Vec<&String> = ids.choose_multiple(rng, k).collect();
            if chosen.iter().any(|c| c.starts_with("sysid")) {
                chosen = vec![&ids[0]];
            }
            let neg = chosen[0] != &ids[0] && rng.random_bool(neg_p);
            let refs: String = chosen.iter().map(|c| format!(r#"<{refel} ref="{c}"/>"#)).collect();
            format!(r#"<{tag} neg="{}">{refs}</{tag}>"#, if neg { "True" } else { "False" })
        };
        let src = el("Src", "ObjectRef", &addr_ids, 0.2, rng);
        let dst = el("Dst", "ObjectRef", &addr_ids, 0.2, rng);
        let srv = el("Srv", "ServiceRef", &srv_ids, 0.15, rng);
        let itfs: Vec<String> = itf_ids.iter().map(|s| s.to_string()).collect();
        let itf = el("Itf", "ObjectRef", &itfs, 0.2, rng);
        writeln!(
            rules,
            r#"<PolicyRule id="r{pos}" position="{pos}" action="{action}" direction="{dir}">{src}{dst}{srv}{itf}</PolicyRule>"#
        )
        .unwrap();
    }
    format!(
        r#"<?xml version="1.0" encoding="UTF-8"?>
<FWObjectDatabase version="1">
<Library id="lib-rnd" name="Random">
{objs}<Firewall id="rnd" name="rnd" platform="iptables" host_OS="linux24">
<Interface id="gw-eth0" name="eth0"><IPv4 id="gw-eth0-ip" name="eth0:ip" address="192.0.2.1" netmask="255.255.255.0"/></Interface>
<Interface id="gw-eth1" name="eth1"><IPv4 id="gw-eth1-ip" name="eth1:ip" address="198.51.100.1" netmask="255.255.255.0"/></Interface>
<Policy id="rnd-policy">
{rules}</Policy>
</Firewall>
</Library>
</FWObjectDatabase>
"#
    )
}

/// Transports over the ports of `shape`: TCP to each port plus one UDP and
/// one ICMP packet.
pub fn shape_transports(shape: &Shape) -> Vec<Transport> {
    let mut t: Vec<Transport> = shape
        .ports
        .iter()
        .map(|&dport| Transport::Tcp {
            sport: 40000,
            dport,
            flags: fwcomp::model::TcpFlags(fwcomp::model::TcpFlags::SYN),
        })
        .collect();
    t.push(Transport::Udp {
        sport: 40000,
        dport: shape.ports[3],
    });
    t.push(Transport::Icmp { icmp_type: 8, code: 0 });
    t
}

/// 2^10 packets: four sources and all eight addresses of a /29 window as
/// destinations, eight transports, both interfaces and directions.
pub const SMALL: Shape = Shape {
    base: 0x0a00_0000,
    prefix: 29,
    ports: [21, 22, 23, 25, 53, 79, 80, 81],
    rules: 5..=10,
};

pub fn small_universe() -> Universe {
    let srcs = [0x0a00_0000u32, 0x0a00_0003, 0x0a00_0006, 0x0b00_0000]
        .map(Ipv4Addr::from)
        .to_vec();
    let dsts = (0..8u32).map(|i| Ipv4Addr::from(SMALL.base + i)).collect();
    let mut transports = shape_transports(&SMALL);
    transports.truncate(6);
    transports.push(Transport::Udp { sport: 40000, dport: 53 });
    transports.push(Transport::Icmp { icmp_type: 8, code: 0 });
    let u = Universe::new(srcs, dsts, transports, vec!["eth0".into(), "eth1".into()]);
    assert_eq!(u.size(), 1 << 10);
    u
}

/// A /22 window of destinations, eight ports, both directions, two interfaces.
pub const WIDE: Shape = Shape {
    base: 0x0a00_0400,
    prefix: 22,
    ports: [20, 21, 22, 25, 53, 80, 443, 8080],
    rules: 3..=10,
};

pub fn wide_universe() -> Universe {
    let srcs = [WIDE.base, WIDE.base + 517, WIDE.base + 1023, 0x0b00_0000]
        .map(Ipv4Addr::from)
        .to_vec();
    let dsts = (0..1024u32).map(|i| Ipv4Addr::from(WIDE.base + i)).collect();
    Universe::new(srcs, dsts, shape_transports(&WIDE), vec!["eth0".into(), "eth1".into()])
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}
