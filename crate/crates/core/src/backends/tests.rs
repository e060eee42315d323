use super::*;
use crate::analysis::Universe;
use crate::semantics::evaluate;
use crate::testutil::*;
use crate::transform::{AddrAtom, AddrMatch, FlatRule, RuleKind, SrvAtom};
use proptest::prelude::*;

fn lowered(target: Platform, filter: Vec<FlatRule>) -> Lowered {
    let mut filter = filter;
    filter.push(FlatRule::default_marker());
    Lowered {
        target,
        interfaces: vec!["eth0".into(), "eth1".into()],
        filter,
        nat: Vec::new(),
        warnings: Vec::new(),
    }
}

fn script(target: Platform, text: &str) -> Script {
    Script::from_text(target, text)
}

fn udp_pkt(src: &str, dst: &str, sport: u16, dport: u16, iface: &str) -> Packet {
    Packet::udp(ip(src), ip(dst), sport, dport, iface, Direction::Inbound)
}

#[test]
fn capabilities_by_name() {
    use crate::transform::{DefaultPolicy, MatchStrategy};
    assert_eq!(capabilities("iptables").unwrap().match_strategy, MatchStrategy::First);
    assert_eq!(capabilities("pf").unwrap().default_policy, DefaultPolicy::Pass);
    assert!(!capabilities("ipfilter").unwrap().supports_address_ranges);
    assert_eq!(capabilities("pix"), Err(BackendError::UnknownTarget("pix".into())));
}

#[test]
fn empty_policy_on_pf() {
    let s = emit(&lowered(Platform::Pf, vec![])).unwrap();
    assert_eq!(s.text(), "block quick all\n");
    let p = udp_pkt("1.1.1.1", "2.2.2.2", 1, 2, "eth0");
    let v = interpret(Platform::Pf, &s, &p).unwrap();
    assert_eq!(v.action, VerdictAction::Drop);
    assert_eq!(v.matched_rule, None);
}

#[test]
fn iptables_filter_line() {
    let r = FlatRule {
        origin: Some(0),
        kind: RuleKind::Filter,
        action: Action::Accept,
        direction: Some(Direction::Inbound),
        iface: Some("if0".into()),
        dst: AddrMatch::pos(AddrAtom::Cidr("10.86.81.0/24".parse().unwrap())),
        srv: SrvAtom::Udp {
            src: PortRange::new(30, 70),
            dst: PortRange::new(90, 92),
        },
        ..FlatRule::default_marker()
    };
    let s = emit(&lowered(Platform::Iptables, vec![r])).unwrap();
    assert_eq!(
        s.lines.last().unwrap(),
        "iptables -A FORWARD -i if0 -p udp -d 10.86.81.0/24 --sport 30:70 --dport 90:92 -j ACCEPT"
    );
    assert!(s.lines.contains(&"iptables -P FORWARD DROP".to_string()));
}

#[test]
fn pf_negated_table() {
    let r = FlatRule {
        origin: Some(0),
        kind: RuleKind::Filter,
        action: Action::Accept,
        direction: Some(Direction::Inbound),
        dst: AddrMatch {
            atom: AddrAtom::Set(vec!["1.2.3.4".parse().unwrap(), "10.20.30.40".parse().unwrap()]),
            negated: true,
        },
        ..FlatRule::default_marker()
    };
    let s = emit(&lowered(Platform::Pf, vec![r])).unwrap();
    assert_eq!(
        s.lines,
        [
            "table <neg0> { 1.2.3.4, 10.20.30.40 }",
            "pass in quick from any to ! <neg0>",
            "block quick all"
        ]
    );
    let v = |dst| interpret(Platform::Pf, &s, &udp_pkt("9.9.9.9", dst, 1, 2, "eth0")).unwrap().action;
    assert_eq!(v("10.20.30.40"), VerdictAction::Drop);
    assert_eq!(v("10.20.30.41"), VerdictAction::Accept);
}

#[test]
fn listing_three_script_agrees_with_model() {
    let db = crate::fwbxml::parse(include_str!("../../tests/corpus/listing.fwb")).unwrap();
    let fw = db.firewall("MyFirewall").unwrap().1;
    let (_, s) = compile(fw, Platform::Iptables, &db).unwrap();
    let p = udp_pkt("10.0.0.5", "10.86.81.7", 50, 91, "if0");
    let got = interpret(Platform::Iptables, &s, &p).unwrap();
    let want = evaluate(fw, &p, &db).unwrap();
    assert_eq!(got.action, VerdictAction::Drop);
    assert_eq!(got.matched_rule, Some(0));
    assert_eq!(got.observable(), want.observable());
    let miss = udp_pkt("10.0.0.5", "10.86.81.7", 50, 93, "if0");
    assert_eq!(interpret(Platform::Iptables, &s, &miss).unwrap().action, VerdictAction::DefaultDrop);
}

#[test]
fn ipfilter_last_match_without_quick() {
    let s = script(
        Platform::Ipfilter,
        "pass in from any to 10.0.0.0/8\nblock in from any to 10.1.0.0/16\n",
    );
    let v = interpret(Platform::Ipfilter, &s, &udp_pkt("1.1.1.1", "10.1.2.3", 1, 2, "eth0")).unwrap();
    assert_eq!(v.action, VerdictAction::Drop);
    let v = interpret(Platform::Ipfilter, &s, &udp_pkt("1.1.1.1", "10.2.2.3", 1, 2, "eth0")).unwrap();
    assert_eq!(v.action, VerdictAction::Accept);
    // nothing matches: ipfilter passes by default
    let v = interpret(Platform::Ipfilter, &s, &udp_pkt("1.1.1.1", "11.2.2.3", 1, 2, "eth0")).unwrap();
    assert_eq!(v.action, VerdictAction::Accept);
    // quick stops at the first match
    let s = script(
        Platform::Ipfilter,
        "pass in quick from any to 10.0.0.0/8\nblock in from any to 10.1.0.0/16\n",
    );
    let v = interpret(Platform::Ipfilter, &s, &udp_pkt("1.1.1.1", "10.1.2.3", 1, 2, "eth0")).unwrap();
    assert_eq!(v.action, VerdictAction::Accept);
}

#[test]
fn ipfilter_port_grammar() {
    let r = |lo, hi| FlatRule {
        origin: Some(0),
        kind: RuleKind::Filter,
        action: Action::Accept,
        direction: Some(Direction::Inbound),
        srv: SrvAtom::Tcp {
            src: PortRange::ANY,
            dst: PortRange::new(lo, hi),
            flags: None,
        },
        ..FlatRule::default_marker()
    };
    let s = emit(&lowered(Platform::Ipfilter, vec![r(80, 80), r(0, 1023), r(1024, 65535), r(30, 70)])).unwrap();
    assert_eq!(
        s.lines[..4],
        [
            "pass in quick proto tcp from any to any port = 80",
            "pass in quick proto tcp from any to any port <= 1023",
            "pass in quick proto tcp from any to any port >= 1024",
            "pass in quick proto tcp from any to any port 29 >< 71",
        ]
    );
    let i = Interpreter::new(&s).unwrap();
    let hit = |port| {
        let p = Packet::tcp(ip("1.1.1.1"), ip("2.2.2.2"), 1, port, "eth0", Direction::Inbound);
        i.run(&p, &Env::default()).unwrap().matched_rule
    };
    assert_eq!(hit(29), Some(0));
    let s = emit(&lowered(Platform::Ipfilter, vec![r(30, 70)])).unwrap();
    let i = Interpreter::new(&s).unwrap();
    let act = |port| {
        let p = Packet::tcp(ip("1.1.1.1"), ip("2.2.2.2"), 1, port, "eth0", Direction::Inbound);
        i.run(&p, &Env::default()).unwrap().action
    };
    assert_eq!(act(29), VerdictAction::Drop);
    assert_eq!(act(30), VerdictAction::Accept);
    assert_eq!(act(70), VerdictAction::Accept);
    assert_eq!(act(71), VerdictAction::Drop);
}

#[test]
fn lines_outside_the_grammar_are_rejected() {
    for (t, text) in [
        (Platform::Iptables, "iptables -A INPUT -j ACCEPT"),
        (Platform::Iptables, "iptables -A FORWARD --frobnicate"),
        (Platform::Pf, "pass in quick from any to any route-to em0"),
        (Platform::Ipfilter, "pass quick from any to any"),
    ] {
        match Interpreter::new(&script(t, text)) {
            Err(BackendError::UnparseableScript { line: 1, .. }) => {}
            other => panic!("{t} {text:?}: {other:?}"),
        }
    }
    let s = script(Platform::Pf, "block quick all");
    assert!(matches!(
        interpret(Platform::Iptables, &s, &udp_pkt("1.1.1.1", "2.2.2.2", 1, 2, "eth0")),
        Err(BackendError::WrongTarget { .. })
    ));
}

#[test]
fn unbound_values_are_reported() {
    let s = script(Platform::Pf, "pass in quick from (eth1) to any\nblock quick all");
    let p = udp_pkt("1.1.1.1", "2.2.2.2", 1, 2, "eth0");
    assert!(matches!(interpret(Platform::Pf, &s, &p), Err(BackendError::Unbound(_))));
    // a known mismatch decides without the binding
    let s = script(Platform::Pf, "pass out quick from (eth1) to any\nblock quick all");
    assert_eq!(interpret(Platform::Pf, &s, &p).unwrap().action, VerdictAction::Drop);
}

/// Compiles `compile_db` for `target` and compares the script with the
/// model of `oracle_db` over the critical universe of the oracle.
fn assert_agrees(compile_db: &ObjectDatabase, oracle_db: &ObjectDatabase, target: Platform, env: &Env) {
    assert_agrees_in(compile_db, oracle_db, target, env, |_| {})
}

fn assert_agrees_in(
    compile_db: &ObjectDatabase,
    oracle_db: &ObjectDatabase,
    target: Platform,
    env: &Env,
    shrink: impl Fn(&mut Universe),
) {
    let (_, s) = compile(the_fw(compile_db), target, compile_db).unwrap_or_else(|e| panic!("{target}: {e}"));
    let fw = the_fw(oracle_db);
    let mut u = Universe::critical(fw, oracle_db);
    shrink(&mut u);
    u.check_bound().unwrap();
    let again = Script::from_text(target, &s.text());
    assert_eq!(again.lines, s.lines);
    if let Some(m) = first_mismatch(&s, fw, oracle_db, u.packets(), env).unwrap() {
        panic!("{target}: {m}\n{}", s.text());
    }
}

fn agree_all(db: &ObjectDatabase, targets: &[Platform]) {
    for &t in targets {
        assert_agrees(db, db, t, &Env::default());
    }
}

#[test]
fn mixed_policy_agrees_on_every_target() {
    let db = FwBuilder::new()
        .obj(addr("a", "10.0.0.1"))
        .obj(addr("b", "10.0.0.9"))
        .obj(range("rg", "10.1.0.3", "10.1.0.17"))
        .obj(tcp("http", (80, 80)))
        .obj(udp("dns", (0, 65535), (53, 53)))
        .obj(group("ab", &["a", "b"]))
        .rule(PolicyRule {
            src: el(&["a", "rg"]),
            srv: el(&["http", "dns"]),
            ..rule(0, Action::Accept)
        })
        .rule(PolicyRule {
            dst: el(&["b"]).negate(),
            ..rule(1, Action::Accounting)
        })
        .rule(PolicyRule {
            itf: el(&["fw-eth0"]),
            direction: RuleDirection::Inbound,
            srv: el(&["http"]).negate(),
            ..rule(2, Action::Reject)
        })
        .rule(PolicyRule {
            src: el(&["ab"]).negate(),
            itf: el(&["fw-eth1"]).negate(),
            ..rule(3, Action::Accept)
        })
        .build();
    agree_all(&db, &Platform::ALL);
}

#[test]
fn snat_agrees_on_every_target_that_has_it() {
    let db = FwBuilder::new()
        .obj(net("lan", "192.168.1.0/24"))
        .obj(addr("pub", "203.0.113.1"))
        .obj(net("dmz", "203.0.113.0/28"))
        .obj(net("ten", "10.0.0.0/8"))
        .rule(PolicyRule {
            src: el(&["pub"]),
            ..rule(0, Action::Accept)
        })
        .rule(PolicyRule {
            src: el(&["dmz"]),
            direction: RuleDirection::Outbound,
            ..rule(1, Action::Reject)
        })
        .rule(PolicyRule {
            src: el(&["ten"]),
            ..rule(2, Action::Accept)
        })
        .nat(NatRule {
            osrc: el(&["lan"]),
            tsrc: Some("pub".into()),
            ..NatRule::any("n0", 0)
        })
        .build();
    agree_all(&db, &Platform::ALL);
    let (l, s) = compile(the_fw(&db), Platform::Iptables, &db).unwrap();
    assert_eq!(l.filter[0].src.atom, AddrAtom::Cidr("192.168.1.0/24".parse().unwrap()));
    assert!(s.text().contains("iptables -t nat -A POSTROUTING -s 192.168.1.0/24 -j SNAT --to-source 203.0.113.1"));
}

#[test]
fn dnat_with_port_agrees() {
    let db = FwBuilder::new()
        .obj(addr("pub", "203.0.113.1"))
        .obj(addr("srv", "10.0.0.5"))
        .obj(tcp("http", (80, 80)))
        .obj(tcp("alt", (8080, 8080)))
        .obj(udp("dns", (0, 65535), (53, 53)))
        .rule(PolicyRule {
            dst: el(&["srv"]),
            srv: el(&["alt"]),
            ..rule(0, Action::Accept)
        })
        .rule(PolicyRule {
            dst: el(&["srv"]),
            srv: el(&["dns"]),
            ..rule(1, Action::Accept)
        })
        .nat(NatRule {
            odst: el(&["pub"]),
            tdst: Some("srv".into()),
            tsrv: Some("alt".into()),
            ..NatRule::any("n0", 0)
        })
        .build();
    agree_all(&db, &Platform::ALL);
}

#[test]
fn mixed_nat_with_exemptions_on_pf() {
    let db = FwBuilder::new()
        .obj(net("lan", "192.168.1.0/24"))
        .obj(addr("h", "192.168.1.7"))
        .obj(addr("pub", "203.0.113.1"))
        .obj(addr("srv", "10.0.0.5"))
        .rule(rule(0, Action::Accept))
        .nat(NatRule {
            osrc: el(&["h"]),
            ..NatRule::any("n0", 0)
        })
        .nat(NatRule {
            osrc: el(&["lan"]),
            tsrc: Some("pub".into()),
            ..NatRule::any("n1", 1)
        })
        .nat(NatRule {
            odst: el(&["pub"]),
            tdst: Some("srv".into()),
            ..NatRule::any("n2", 2)
        })
        .build();
    agree_all(&db, &[Platform::Pf]);
    for t in [Platform::Iptables, Platform::Ipfilter] {
        assert!(compile(the_fw(&db), t, &db).is_err());
    }
}

#[test]
fn time_and_mac_on_iptables() {
    let iv = TimeInterval {
        days: Weekdays::parse("Mon,Tue,Wed,Thu,Fri").unwrap(),
        from: Some(8 * 60),
        to: Some(17 * 60),
        ..Default::default()
    };
    let night = TimeInterval {
        from: Some(22 * 60),
        to: Some(6 * 60),
        start: Some(crate::model::time::parse_datetime("2024-01-01T00:00").unwrap()),
        end: None,
        ..Default::default()
    };
    let db = FwBuilder::new()
        .obj(Object::new("work", "work", ObjectKind::Interval(iv)))
        .obj(Object::new("night", "night", ObjectKind::Interval(night)))
        .obj(mac("m", "00:17:f2:ea:ee:35"))
        .rule(PolicyRule {
            src: el(&["m"]).negate(),
            when: el(&["work"]),
            ..rule(0, Action::Accept)
        })
        .rule(PolicyRule {
            when: el(&["night"]),
            ..rule(1, Action::Reject)
        })
        .rule(PolicyRule {
            src: el(&["m"]),
            ..rule(2, Action::Accept)
        })
        .build();
    // No rule looks at addresses or ports here.
    assert_agrees_in(&db, &db, Platform::Iptables, &Env::default(), |u| {
        u.srcs = vec![ip("10.0.0.1")];
        u.dsts = vec![ip("10.0.0.2")];
        u.transports = vec![Transport::Udp { sport: 1, dport: 2 }, Transport::Other(47)];
    });
    for t in [Platform::Pf, Platform::Ipfilter] {
        assert!(compile(the_fw(&db), t, &db).is_err());
    }
}

#[test]
fn dynamic_interface_with_runtime_binding() {
    let rules = |b: FwBuilder| {
        b.rule(PolicyRule {
            src: el(&["fw-eth1"]),
            direction: RuleDirection::Outbound,
            ..rule(0, Action::Accept)
        })
        .rule(PolicyRule {
            dst: el(&["fw-eth1"]).negate(),
            direction: RuleDirection::Inbound,
            ..rule(1, Action::Accept)
        })
        .build()
    };
    let compile_db = rules(FwBuilder {
        dynamic_eth1: true,
        ..FwBuilder::new()
    });
    let oracle_db = rules(FwBuilder::new());
    let env = Env {
        dynamic: HashMap::from([("eth1".to_string(), ip("198.51.100.1"))]),
        ..Env::default()
    };
    let (_, s) = compile(the_fw(&compile_db), Platform::Ipfilter, &compile_db).unwrap();
    assert!(s.lines[0].contains("from eth1/32 to any"), "{}", s.text());
    for t in [Platform::Pf, Platform::Ipfilter] {
        assert_agrees(&compile_db, &oracle_db, t, &env);
    }
}

#[test]
fn deploy_time_table_on_pf() {
    let build = |load| {
        FwBuilder::new()
            .obj(Object::new(
                "bad",
                "bad",
                ObjectKind::AddressTable {
                    path: "bad.txt".into(),
                    load,
                },
            ))
            .rule(PolicyRule {
                src: el(&["bad"]),
                ..rule(0, Action::Deny)
            })
            .rule(rule(1, Action::Accept))
            .build()
    };
    let set = AddressSet::cidr("10.9.0.0/16".parse().unwrap()).union(&AddressSet::single(u32::from(ip("1.2.3.4"))));
    let compile_db = build(LoadTime::Deploy);
    let oracle_db = build(LoadTime::Compile)
        .with_loaded_tables(|_, _| Ok::<_, ()>(set.clone()))
        .unwrap();
    let env = Env {
        files: HashMap::from([("bad.txt".to_string(), set.clone())]),
        ..Env::default()
    };
    let (_, s) = compile(the_fw(&compile_db), Platform::Pf, &compile_db).unwrap();
    assert_eq!(s.lines[0], "table <t0> persist file \"bad.txt\"");
    assert_eq!(s.tables.get("t0"), Some(&TableDef::File("bad.txt".into())));
    assert_agrees(&compile_db, &oracle_db, Platform::Pf, &env);
    for t in [Platform::Iptables, Platform::Ipfilter] {
        assert!(compile(the_fw(&compile_db), t, &compile_db).is_err());
    }
}

#[test]
fn emission_is_deterministic() {
    let db = crate::fwbxml::parse(include_str!("../../tests/corpus/listing.fwb")).unwrap();
    let fw = db.firewall("MyFirewall").unwrap().1;
    for t in Platform::ALL {
        let a = compile(fw, t, &db).unwrap().1;
        let b = compile(fw, t, &db).unwrap().1;
        assert_eq!(a.text(), b.text());
        assert!(a.text().ends_with('\n') && a.text().is_ascii());
    }
}

fn pool() -> FwBuilder {
    FwBuilder::new()
        .obj(net("n1", "10.0.0.0/30"))
        .obj(addr("h1", "10.0.0.2"))
        .obj(addr("h2", "10.0.0.5"))
        .obj(range("r1", "10.0.0.3", "10.0.0.6"))
        .obj(group("g1", &["h1", "h2"]))
        .obj(tcp("t80", (80, 80)))
        .obj(tcp("tlow", (0, 1023)))
        .obj(udp("u53", (0, 65535), (53, 53)))
        .obj(udp("uhi", (1024, 65535), (1000, 2000)))
}

/// Boundary points of the pool objects.
fn pool_universe() -> Universe {
    let mut addrs: Vec<Ipv4Addr> = (0..8).map(|i| Ipv4Addr::new(10, 0, 0, i)).collect();
    addrs.extend([ip("0.0.0.0"), ip("192.0.2.1"), ip("198.51.100.1"), ip("255.255.255.255")]);
    let mut transports = Vec::new();
    for sport in [0, 1023, 1024] {
        for dport in [79, 80, 81, 1023, 1024] {
            transports.push(Transport::Tcp {
                sport,
                dport,
                flags: TcpFlags(TcpFlags::SYN),
            });
        }
        for dport in [52, 53, 54, 999, 1000, 2000, 2001] {
            transports.push(Transport::Udp { sport, dport });
        }
    }
    transports.extend([Transport::Icmp { icmp_type: 8, code: 0 }, Transport::Other(47)]);
    Universe::new(addrs.clone(), addrs, transports, vec!["eth0".into(), "eth1".into()])
}

const ADDRS: [&str; 6] = ["sysid0", "n1", "h1", "h2", "r1", "g1"];
const SRVS: [&str; 5] = ["sysid1", "t80", "tlow", "u53", "uhi"];
const ITFS: [&str; 3] = ["sysid0", "fw-eth0", "fw-eth1"];

fn arb_rule() -> impl Strategy<Value = (u8, [usize; 3], usize, usize, [bool; 4], u8)> {
    (0u8..4, [0usize..6, 0usize..6, 0usize..6], 0usize..5, 0usize..3, any::<[bool; 4]>(), 0u8..3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_policies_agree_on_every_target(rules in prop::collection::vec(arb_rule(), 1..6)) {
        let u = pool_universe();
        let mut b = pool();
        for (i, (act, [s1, s2, d], srv, itf, neg, dir)) in rules.into_iter().enumerate() {
            let action = [Action::Accept, Action::Deny, Action::Reject, Action::Accounting][act as usize];
            let mut src = el(&[ADDRS[s1], ADDRS[s2]]);
            if src.is_any() || s1 == s2 {
                src = el(&[ADDRS[s1]]);
            }
            src.negated = neg[0] && s1 != 0;
            let mut dst = el(&[ADDRS[d]]);
            // Complements multiply into tens of thousands of lines on
            // ipfilter; one negated field per rule keeps runs short.
            dst.negated = neg[1] && d != 0 && !src.negated;
            let mut srv_el = el(&[SRVS[srv]]);
            srv_el.negated = neg[2] && srv != 0 && !src.negated && !dst.negated;
            let mut itf_el = el(&[ITFS[itf]]);
            itf_el.negated = neg[3] && itf != 0;
            b = b.rule(PolicyRule {
                src,
                dst,
                srv: srv_el,
                itf: itf_el,
                direction: [RuleDirection::Inbound, RuleDirection::Outbound, RuleDirection::Both][dir as usize],
                ..rule(i as u32, action)
            });
        }
        let db = b.build();
        for t in Platform::ALL {
            let (_, s) = compile(the_fw(&db), t, &db).map_err(|e| TestCaseError::fail(format!("{t}: {e}")))?;
            let fw = the_fw(&db);
            if let Some(m) = first_mismatch(&s, fw, &db, u.packets(), &Env::default()).unwrap() {
                return Err(TestCaseError::fail(format!("{t}: {m}\n{}", s.text())));
            }
        }
    }
}

