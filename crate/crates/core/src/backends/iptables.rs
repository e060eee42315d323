use super::*;
use crate::model::time::{format_minute, parse_datetime, parse_minute};
use crate::transform::{AddrAtom, AddrMatch, FlatRule, RuleKind};

fn violation(message: impl Into<String>) -> BackendError {
    BackendError::InvariantViolation {
        target: Platform::Iptables,
        message: message.into(),
    }
}

fn addr_opts(m: &AddrMatch, src: bool, out: &mut Vec<String>) -> Result<(), BackendError> {
    let neg = if m.negated { "! " } else { "" };
    let flag = if src { "-s" } else { "-d" };
    match &m.atom {
        AddrAtom::Any => {}
        AddrAtom::Cidr(c) => out.push(format!("{neg}{flag} {c}")),
        AddrAtom::Range(a, b) => out.push(format!(
            "-m iprange {neg}--{}-range {}-{}",
            if src { "src" } else { "dst" },
            Ipv4Addr::from(*a),
            Ipv4Addr::from(*b)
        )),
        AddrAtom::Mac(mac) if src => out.push(format!("-m mac {neg}--mac-source {mac}")),
        other => return Err(violation(format!("address {other:?} has no iptables form"))),
    }
    Ok(())
}

fn port_opt(name: &str, r: (u16, u16)) -> String {
    if r.0 == r.1 {
        format!("--{name} {}", r.0)
    } else {
        format!("--{name} {}:{}", r.0, r.1)
    }
}

fn srv_opts(p: &SrvParts, out: &mut Vec<String>) {
    if let Some(r) = p.sport {
        out.push(port_opt("sport", r));
    }
    if let Some(r) = p.dport {
        out.push(port_opt("dport", r));
    }
    if let Some(f) = p.flags {
        out.push(format!("--tcp-flags {} {}", f.mask.to_list(), f.set.to_list()));
    }
    if let Some((t, c)) = p.icmp {
        match c {
            Some(c) => out.push(format!("--icmp-type {t}/{c}")),
            None => out.push(format!("--icmp-type {t}")),
        }
    }
}

fn time_opts(iv: &TimeInterval, out: &mut Vec<String>) {
    let mut s = "-m time".to_string();
    if let Some(d) = iv.start {
        s.push_str(&format!(" --datestart {}", d.format("%Y-%m-%dT%H:%M:%S")));
    }
    if let Some(d) = iv.end {
        s.push_str(&format!(" --datestop {}", d.format("%Y-%m-%dT%H:%M:%S")));
    }
    if !iv.days.is_empty() {
        s.push_str(&format!(" --weekdays {}", iv.days));
    }
    if let Some(m) = iv.from {
        s.push_str(&format!(" --timestart {}", format_minute(m)));
    }
    if let Some(m) = iv.to {
        s.push_str(&format!(" --timestop {}", format_minute(m)));
    }
    out.push(s);
}

/// Match options shared by filter and NAT lines.
fn match_opts(r: &FlatRule, parts: &SrvParts) -> Result<Vec<String>, BackendError> {
    let mut o = Vec::new();
    match r.direction {
        Some(Direction::Inbound) => o.push(format!("-i {}", r.iface.as_deref().unwrap_or("+"))),
        Some(Direction::Outbound) => o.push(format!("-o {}", r.iface.as_deref().unwrap_or("+"))),
        None if r.iface.is_some() => return Err(violation("interface without direction")),
        None => {}
    }
    if let Some(n) = parts.proto {
        o.push(format!("-p {}", proto_name(n)));
    }
    let mac = matches!(r.src.atom, AddrAtom::Mac(_));
    if !mac {
        addr_opts(&r.src, true, &mut o)?;
    }
    addr_opts(&r.dst, false, &mut o)?;
    srv_opts(parts, &mut o);
    if mac {
        addr_opts(&r.src, true, &mut o)?;
    }
    if let Some(iv) = &r.when {
        time_opts(iv, &mut o);
    }
    Ok(o)
}

pub(super) fn emit(l: &Lowered) -> Result<Script, BackendError> {
    let mut s = Script::new(Platform::Iptables);
    s.push("#!/bin/sh".into(), None);
    for line in ["iptables -F", "iptables -t nat -F"] {
        s.push(line.into(), None);
    }
    for chain in ["INPUT", "OUTPUT", "FORWARD"] {
        s.push(format!("iptables -P {chain} DROP"), None);
    }

    let chain = if l.nat.iter().any(|r| r.kind == RuleKind::Snat) {
        "POSTROUTING"
    } else {
        "PREROUTING"
    };
    for r in &l.nat {
        for (proto, port) in bsd::nat_variants(r) {
            let mut parts = srv_parts(&r.srv);
            if proto.is_some() {
                parts.proto = proto;
            }
            let mut o = match_opts(r, &parts)?;
            let to = |a: Option<Ipv4Addr>| {
                let mut t = a.map(|a| a.to_string()).unwrap_or_default();
                if let Some(p) = port {
                    t.push_str(&format!(":{p}"));
                }
                t
            };
            let jump = match r.kind {
                RuleKind::Snat if r.tsrc.is_some() || port.is_some() => format!("-j SNAT --to-source {}", to(r.tsrc)),
                RuleKind::Dnat if r.tdst.is_some() || port.is_some() => {
                    format!("-j DNAT --to-destination {}", to(r.tdst))
                }
                RuleKind::Snat | RuleKind::Dnat | RuleKind::NoNat => "-j ACCEPT".into(),
                k => return Err(violation(format!("{k:?} rule in the NAT list"))),
            };
            o.push(jump);
            s.push(format!("iptables -t nat -A {chain} {}", o.join(" ")), r.origin);
        }
    }

    for r in &l.filter {
        match r.kind {
            RuleKind::Filter => {}
            // The chain policies already drop.
            RuleKind::DefaultPolicy => continue,
            k => return Err(violation(format!("{k:?} rule in the filter list"))),
        }
        let mut o = match_opts(r, &srv_parts(&r.srv))?;
        match r.action {
            Action::Accept => o.push("-j ACCEPT".into()),
            Action::Deny => o.push("-j DROP".into()),
            Action::Reject => o.push("-j REJECT".into()),
            Action::Accounting => {}
        }
        s.push(format!("iptables -A FORWARD {}", o.join(" ")), r.origin);
    }
    Ok(s)
}

enum Line {
    Skip,
    Policy(VerdictAction),
    Nat { post: bool, nat: NatLine },
    Filter(Verb, Cond),
}

fn parse_port_range(v: &str) -> Option<(u16, u16)> {
    match v.split_once(':') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => v.parse().ok().map(|p| (p, p)),
    }
}

fn parse_line(toks: &[&str]) -> Result<Line, String> {
    if toks.first() != Some(&"iptables") {
        return Err("expected an iptables command".into());
    }
    let mut i = 1;
    let mut nat_table = false;
    if toks.get(1) == Some(&"-t") {
        match toks.get(2) {
            Some(&"nat") => nat_table = true,
            Some(&"filter") => {}
            _ => return Err("unknown table".into()),
        }
        i = 3;
    }
    match toks.get(i) {
        Some(&"-F") => return Ok(Line::Skip),
        Some(&"-P") => {
            return match (toks.get(i + 1), toks.get(i + 2)) {
                // Only forwarded traffic is modelled.
                (Some(&"FORWARD"), Some(&"DROP")) => Ok(Line::Policy(VerdictAction::DefaultDrop)),
                (Some(&"FORWARD"), Some(&"ACCEPT")) => Ok(Line::Policy(VerdictAction::Accept)),
                (Some(_), Some(&"DROP" | &"ACCEPT")) => Ok(Line::Skip),
                _ => Err("bad policy".into()),
            }
        }
        Some(&"-A") => {}
        _ => return Err("expected -A, -P or -F".into()),
    }
    let chain = *toks.get(i + 1).ok_or("missing chain")?;
    match (nat_table, chain) {
        (false, "FORWARD") | (true, "PREROUTING" | "POSTROUTING") => {}
        _ => return Err(format!("unsupported chain {chain}")),
    }
    i += 2;

    let mut c = Cond::default();
    let mut neg = false;
    let mut jump: Option<String> = None;
    let mut to: Option<String> = None;
    let mut time: Option<TimeInterval> = None;
    let next = |i: &mut usize| -> Result<&str, String> {
        *i += 1;
        toks.get(*i).copied().ok_or_else(|| format!("{} needs a value", toks[*i - 1]))
    };
    while i < toks.len() {
        let t = toks[i];
        let was_neg = std::mem::take(&mut neg);
        match t {
            "!" => {
                neg = true;
                i += 1;
                continue;
            }
            "-i" | "-o" => {
                c.dir = Some(if t == "-i" { Direction::Inbound } else { Direction::Outbound });
                let v = next(&mut i)?;
                c.iface = (v != "+").then(|| v.to_string());
            }
            "-p" => c.proto = Some(parse_proto(next(&mut i)?).ok_or("bad protocol")?),
            "-s" | "-d" => {
                let v: Cidr = next(&mut i)?.parse()?;
                let a = AddrCond {
                    spec: AddrSpec::Set(AddressSet::cidr(v)),
                    negated: was_neg,
                };
                if t == "-s" {
                    c.src = a;
                } else {
                    c.dst = a;
                }
            }
            "-m" => {
                next(&mut i)?;
            }
            "--src-range" | "--dst-range" => {
                let v = next(&mut i)?;
                let (a, b) = v.split_once('-').ok_or("bad address range")?;
                let a: Ipv4Addr = a.parse().map_err(|_| "bad address range")?;
                let b: Ipv4Addr = b.parse().map_err(|_| "bad address range")?;
                let cond = AddrCond {
                    spec: AddrSpec::Set(AddressSet::range(a.into(), b.into())),
                    negated: was_neg,
                };
                if t == "--src-range" {
                    c.src = cond;
                } else {
                    c.dst = cond;
                }
            }
            "--mac-source" => c.mac = Some((next(&mut i)?.parse()?, was_neg)),
            "--sport" => c.sport = Some(parse_port_range(next(&mut i)?).ok_or("bad port")?),
            "--dport" => c.dport = Some(parse_port_range(next(&mut i)?).ok_or("bad port")?),
            "--tcp-flags" => {
                let mask = TcpFlags::parse_list(next(&mut i)?)?;
                let set = TcpFlags::parse_list(next(&mut i)?)?;
                c.flags = Some(FlagMatch { mask, set });
            }
            "--icmp-type" => {
                let v = next(&mut i)?;
                let (ty, code) = match v.split_once('/') {
                    Some((a, b)) => (a, Some(b)),
                    None => (v, None),
                };
                c.icmp_type = Some(ty.parse().map_err(|_| "bad icmp type")?);
                c.icmp_code = code.map(|x| x.parse().map_err(|_| "bad icmp code")).transpose()?;
            }
            "--datestart" => time.get_or_insert_default().start = Some(parse_datetime(next(&mut i)?)?),
            "--datestop" => time.get_or_insert_default().end = Some(parse_datetime(next(&mut i)?)?),
            "--weekdays" => time.get_or_insert_default().days = Weekdays::parse(next(&mut i)?)?,
            "--timestart" => time.get_or_insert_default().from = Some(parse_minute(next(&mut i)?)?),
            "--timestop" => time.get_or_insert_default().to = Some(parse_minute(next(&mut i)?)?),
            "-j" => jump = Some(next(&mut i)?.to_string()),
            "--to-destination" | "--to-source" => to = Some(next(&mut i)?.to_string()),
            other => return Err(format!("unknown option {other}")),
        }
        if was_neg && !matches!(t, "-s" | "-d" | "--src-range" | "--dst-range" | "--mac-source") {
            return Err(format!("{t} cannot be negated"));
        }
        i += 1;
    }
    c.time = time;

    if nat_table {
        let parse_to = |v: &str| -> Result<(Option<Ipv4Addr>, Option<u16>), String> {
            let (a, p) = match v.split_once(':') {
                Some((a, p)) => (a, Some(p.parse().map_err(|_| "bad port")?)),
                None => (v, None),
            };
            let a = if a.is_empty() {
                None
            } else {
                Some(a.parse().map_err(|_| "bad address")?)
            };
            Ok((a, p))
        };
        let action = match (jump.as_deref(), to.as_deref()) {
            (Some("ACCEPT"), None) => NatAction::Exempt,
            (Some("SNAT"), Some(v)) => {
                let (a, p) = parse_to(v)?;
                NatAction::Src(a, p)
            }
            (Some("DNAT"), Some(v)) => {
                let (a, p) = parse_to(v)?;
                NatAction::Dst(a, p)
            }
            _ => return Err("NAT line needs -j ACCEPT, SNAT or DNAT".into()),
        };
        return Ok(Line::Nat {
            post: chain == "POSTROUTING",
            nat: NatLine { action, cond: c },
        });
    }
    let verb = match jump.as_deref() {
        None => Verb::Count,
        Some("ACCEPT") => Verb::Pass,
        Some("DROP") => Verb::Block,
        Some("REJECT") => Verb::Reject,
        Some(j) => return Err(format!("unknown target {j}")),
    };
    Ok(Line::Filter(verb, c))
}

pub(super) fn parse(script: &Script) -> Result<Interpreter, BackendError> {
    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut filter = Vec::new();
    // Without a policy line the chain accepts.
    let mut policy = VerdictAction::Accept;
    for (n, text) in script.lines.iter().enumerate() {
        let t = text.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        match parse_line(&toks).map_err(|m| parse_err(n, text, m))? {
            Line::Skip => {}
            Line::Policy(p) => policy = p,
            Line::Nat { post: true, nat } => post.push(nat),
            Line::Nat { post: false, nat } => pre.push(nat),
            Line::Filter(verb, cond) => filter.push(FilterLine {
                verb,
                quick: true,
                cond,
                line: n,
            }),
        }
    }
    Ok(Interpreter {
        target: Platform::Iptables,
        pre_nat: vec![pre],
        post_nat: post,
        filter,
        last_match: false,
        policy,
        tables: HashMap::new(),
        origins: script.origins.clone(),
    })
}
