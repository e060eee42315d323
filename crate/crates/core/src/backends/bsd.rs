//! pf and ipfilter share most of their rule grammar.

use super::*;
use crate::transform::{AddrAtom, AddrMatch, FlatRule, RuleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Dialect {
    Pf,
    Ipf,
}

impl Dialect {
    fn target(self) -> Platform {
        match self {
            Dialect::Pf => Platform::Pf,
            Dialect::Ipf => Platform::Ipfilter,
        }
    }
}

/// Lines needed for one NAT rule, as (protocol override, rewritten port).
/// A port rewrite only applies to its own protocol, so a rule matching any
/// service is split in two.
pub(super) fn nat_variants(r: &FlatRule) -> Vec<(Option<u8>, Option<u16>)> {
    let Some(rw) = r.tport else {
        return vec![(None, None)];
    };
    let port = match r.kind {
        RuleKind::Snat => rw.src_port,
        RuleKind::Dnat => rw.dst_port,
        _ => None,
    };
    match srv_parts(&r.srv).proto {
        Some(p) if p == rw.protocol => vec![(None, port)],
        Some(_) => vec![(None, None)],
        None => vec![(Some(rw.protocol), port), (None, None)],
    }
}

struct Emitter {
    dialect: Dialect,
    script: Script,
    /// Inline tables by content, file tables by path.
    inline: Vec<(Vec<Cidr>, String)>,
    files: Vec<(String, String)>,
}

impl Emitter {
    fn violation(&self, message: impl Into<String>) -> BackendError {
        BackendError::InvariantViolation {
            target: self.dialect.target(),
            message: message.into(),
        }
    }

    fn addr(&mut self, m: &AddrMatch) -> Result<String, BackendError> {
        let pf = self.dialect == Dialect::Pf;
        let body = match &m.atom {
            AddrAtom::Any if m.negated => return Err(self.violation("negated any")),
            AddrAtom::Any => return Ok("any".into()),
            AddrAtom::Cidr(c) if pf => c.to_string(),
            AddrAtom::Cidr(c) => format!("{}/{}", Ipv4Addr::from(c.base()), c.prefix()),
            AddrAtom::Dynamic(i) if pf => format!("({i})"),
            AddrAtom::Dynamic(i) => format!("{i}/32"),
            AddrAtom::Set(cs) if pf => {
                let name = match self.inline.iter().find(|(k, _)| k == cs) {
                    Some((_, n)) => n.clone(),
                    None => {
                        let n = format!("neg{}", self.inline.len());
                        self.inline.push((cs.clone(), n.clone()));
                        n
                    }
                };
                format!("<{name}>")
            }
            AddrAtom::Table { path, .. } if pf => {
                let name = match self.files.iter().find(|(p, _)| p == path) {
                    Some((_, n)) => n.clone(),
                    None => {
                        let n = format!("t{}", self.files.len());
                        self.files.push((path.clone(), n.clone()));
                        n
                    }
                };
                format!("<{name}>")
            }
            other => return Err(self.violation(format!("address {other:?} has no form on this target"))),
        };
        Ok(match (m.negated, pf) {
            (false, _) => body,
            (true, true) => format!("! {body}"),
            (true, false) => format!("!{body}"),
        })
    }

    fn port(&self, r: (u16, u16)) -> String {
        match (self.dialect, r) {
            (Dialect::Pf, (a, b)) if a == b => format!("port {a}"),
            (Dialect::Pf, (a, b)) => format!("port {a}:{b}"),
            (Dialect::Ipf, (a, b)) if a == b => format!("port = {a}"),
            (Dialect::Ipf, (0, b)) => format!("port <= {b}"),
            (Dialect::Ipf, (a, 65535)) => format!("port >= {a}"),
            (Dialect::Ipf, (a, b)) => format!("port {} >< {}", a - 1, b + 1),
        }
    }

    /// `[on IF] [proto P] from SRC [port] to DST [port] [flags] [icmp-type]`
    fn matching(&mut self, r: &FlatRule, on: Option<&str>, p: &SrvParts) -> Result<String, BackendError> {
        let mut o = Vec::new();
        if let Some(i) = on {
            o.push(format!("on {i}"));
        }
        if let Some(n) = p.proto {
            o.push(format!("proto {}", proto_name(n)));
        }
        o.push(format!("from {}", self.addr(&r.src)?));
        if let Some(s) = p.sport {
            o.push(self.port(s));
        }
        o.push(format!("to {}", self.addr(&r.dst)?));
        if let Some(s) = p.dport {
            o.push(self.port(s));
        }
        if let Some(f) = p.flags {
            o.push(format!("flags {}/{}", f.set.to_letters(), f.mask.to_letters()));
        }
        if let Some((t, c)) = p.icmp {
            o.push(format!("icmp-type {t}"));
            if let Some(c) = c {
                o.push(format!("code {c}"));
            }
        }
        if r.when.is_some() {
            return Err(self.violation("time restriction"));
        }
        Ok(o.join(" "))
    }

    fn nat(&mut self, l: &Lowered) -> Result<(), BackendError> {
        for (k, r) in l.nat.iter().enumerate() {
            let later = |kind| l.nat[k + 1..].iter().any(|x| x.kind == kind);
            let (later_snat, later_dnat) = (later(RuleKind::Snat), later(RuleKind::Dnat));
            for (proto, port) in nat_variants(r) {
                let mut parts = srv_parts(&r.srv);
                if proto.is_some() {
                    parts.proto = proto;
                }
                let port_s = port.map(|p| format!(" port {p}")).unwrap_or_default();
                match self.dialect {
                    Dialect::Pf => {
                        let m = self.matching(r, None, &parts)?;
                        let mut lines = Vec::new();
                        match (r.kind, r.tsrc, r.tdst) {
                            (RuleKind::Snat, Some(a), _) => {
                                lines.push(format!("nat {m} -> {a}{port_s}"));
                                if later_dnat {
                                    lines.push(format!("no rdr {m}"));
                                }
                            }
                            (RuleKind::Dnat, _, Some(a)) => {
                                lines.push(format!("rdr {m} -> {a}{port_s}"));
                                if later_snat {
                                    lines.push(format!("no nat {m}"));
                                }
                            }
                            (RuleKind::NoNat, _, _) => {
                                if later_snat {
                                    lines.push(format!("no nat {m}"));
                                }
                                if later_dnat {
                                    lines.push(format!("no rdr {m}"));
                                }
                            }
                            (k, _, _) => return Err(self.violation(format!("cannot emit {k:?} NAT rule"))),
                        }
                        for line in lines {
                            self.script.push(line, r.origin);
                        }
                    }
                    Dialect::Ipf => {
                        for ifname in &l.interfaces {
                            let m = self.matching(r, None, &parts)?;
                            let line = match (r.kind, r.tsrc, r.tdst) {
                                (RuleKind::Snat, Some(a), _) => format!("map {ifname} {m} -> {a}/32{port_s}"),
                                (RuleKind::Dnat, _, Some(a)) => format!("rdr {ifname} {m} -> {a}{port_s}"),
                                (k, _, _) => return Err(self.violation(format!("cannot emit {k:?} NAT rule"))),
                            };
                            self.script.push(line, r.origin);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn filter(&mut self, l: &Lowered) -> Result<(), BackendError> {
        for r in &l.filter {
            if r.kind == RuleKind::DefaultPolicy {
                match self.dialect {
                    Dialect::Pf => self.script.push("block quick all".into(), None),
                    Dialect::Ipf => {
                        self.script.push("block in quick all".into(), None);
                        self.script.push("block out quick all".into(), None);
                    }
                }
                continue;
            }
            if r.kind != RuleKind::Filter {
                return Err(self.violation(format!("{:?} rule in the filter list", r.kind)));
            }
            let dir = match r.direction {
                Some(Direction::Inbound) => "in",
                Some(Direction::Outbound) => "out",
                None => return Err(self.violation("filter rule without direction")),
            };
            let m = self.matching(r, r.iface.as_deref(), &srv_parts(&r.srv))?;
            let pos = r.origin.unwrap_or(0);
            let line = match (self.dialect, r.action) {
                (_, Action::Accept) => format!("pass {dir} quick {m}"),
                (_, Action::Deny) => format!("block {dir} quick {m}"),
                (Dialect::Pf, Action::Reject) => format!("block return {dir} quick {m}"),
                (Dialect::Ipf, Action::Reject) => format!("block return-icmp {dir} quick {m}"),
                (Dialect::Pf, Action::Accounting) => format!("match {dir} {m} label \"acct{pos}\""),
                (Dialect::Ipf, Action::Accounting) => format!("count {dir} {m}"),
            };
            self.script.push(line, r.origin);
        }
        Ok(())
    }
}

pub(super) fn emit(l: &Lowered, dialect: Dialect) -> Result<Script, BackendError> {
    let mut e = Emitter {
        dialect,
        script: Script::new(dialect.target()),
        inline: Vec::new(),
        files: Vec::new(),
    };
    e.nat(l)?;
    e.filter(l)?;

    let mut out = Script::new(dialect.target());
    for (cs, name) in &e.inline {
        let items: Vec<String> = cs.iter().map(Cidr::to_string).collect();
        out.push(format!("table <{name}> {{ {} }}", items.join(", ")), None);
        out.tables.insert(name.clone(), TableDef::Inline(cs.clone()));
    }
    for (path, name) in &e.files {
        out.push(format!("table <{name}> persist file \"{path}\""), None);
        out.tables.insert(name.clone(), TableDef::File(path.clone()));
    }
    out.lines.extend(e.script.lines);
    out.origins.extend(e.script.origins);
    Ok(out)
}

/// Cursor over the tokens of one line.
struct Toks<'a> {
    t: Vec<&'a str>,
    i: usize,
}

impl<'a> Toks<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.t.get(self.i).copied()
    }

    fn next(&mut self) -> Result<&'a str, String> {
        let v = self.peek().ok_or("unexpected end of line")?;
        self.i += 1;
        Ok(v)
    }

    fn eat(&mut self, w: &str) -> bool {
        if self.peek() == Some(w) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, w: &str) -> Result<(), String> {
        if self.eat(w) {
            Ok(())
        } else {
            Err(format!("expected {w:?}, found {:?}", self.peek().unwrap_or("end of line")))
        }
    }

    fn done(&self) -> Result<(), String> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(format!("unexpected {t:?}")),
        }
    }
}

/// Splits on whitespace, keeping `{ ... }` together and separating `!`.
fn tokenize(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in s.split_whitespace() {
        match w.strip_prefix('!') {
            Some(rest) if !rest.is_empty() => {
                out.push("!");
                out.push(rest);
            }
            _ => out.push(w),
        }
    }
    out
}

fn parse_addr(t: &mut Toks) -> Result<AddrCond, String> {
    let negated = t.eat("!");
    let w = t.next()?;
    let spec = if w == "any" {
        AddrSpec::Any
    } else if let Some(n) = w.strip_prefix('<').and_then(|x| x.strip_suffix('>')) {
        AddrSpec::Table(n.to_string())
    } else if let Some(n) = w.strip_prefix('(').and_then(|x| x.strip_suffix(')')) {
        AddrSpec::Dynamic(n.to_string())
    } else {
        match w.parse::<Cidr>() {
            Ok(c) => AddrSpec::Set(AddressSet::cidr(c)),
            Err(e) => match w.strip_suffix("/32") {
                Some(ifname) if !ifname.is_empty() && ifname.parse::<Ipv4Addr>().is_err() => {
                    AddrSpec::Dynamic(ifname.to_string())
                }
                _ => return Err(e),
            },
        }
    };
    Ok(AddrCond { spec, negated })
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad number {s:?}"))
}

/// Port operators of both dialects, as an inclusive range.
fn parse_port(t: &mut Toks) -> Result<Option<(u16, u16)>, String> {
    if !t.eat("port") {
        return Ok(None);
    }
    let w = t.next()?;
    let r = match w {
        "=" => {
            let p = num(t.next()?)?;
            (p, p)
        }
        "<=" => (0, num(t.next()?)?),
        ">=" => (num(t.next()?)?, 65535),
        "<" => (0, num::<u16>(t.next()?)?.checked_sub(1).ok_or("empty port range")?),
        ">" => (num::<u16>(t.next()?)?.checked_add(1).ok_or("empty port range")?, 65535),
        "!=" => return Err("port != is not supported".into()),
        _ if t.peek() == Some("><") => {
            t.next()?;
            let a: u16 = num(w)?;
            let b: u16 = num(t.next()?)?;
            if b <= a.saturating_add(1) {
                return Err("empty port range".into());
            }
            (a + 1, b - 1)
        }
        _ => match w.split_once(':') {
            Some((a, b)) => (num(a)?, num(b)?),
            None => {
                let p = num(w)?;
                (p, p)
            }
        },
    };
    Ok(Some(r))
}

/// Everything after the direction/quick keywords of a filter line, or after
/// the keyword and interface of a NAT line.
fn parse_match(t: &mut Toks, c: &mut Cond) -> Result<(), String> {
    if t.eat("on") {
        c.iface = Some(t.next()?.to_string());
    }
    if t.eat("proto") {
        c.proto = Some(parse_proto(t.next()?).ok_or("bad protocol")?);
    }
    if t.eat("all") {
        return Ok(());
    }
    t.expect("from")?;
    c.src = parse_addr(t)?;
    c.sport = parse_port(t)?;
    t.expect("to")?;
    c.dst = parse_addr(t)?;
    c.dport = parse_port(t)?;
    if t.eat("flags") {
        let (set, mask) = t.next()?.split_once('/').ok_or("bad flags")?;
        c.flags = Some(FlagMatch {
            mask: TcpFlags::parse_letters(mask)?,
            set: TcpFlags::parse_letters(set)?,
        });
    }
    if t.eat("icmp-type") {
        c.icmp_type = Some(num(t.next()?)?);
        if t.eat("code") {
            c.icmp_code = Some(num(t.next()?)?);
        }
    }
    Ok(())
}

/// `-> ADDR[/32] [port N]`
fn parse_redirect(t: &mut Toks) -> Result<(Ipv4Addr, Option<u16>), String> {
    t.expect("->")?;
    let w = t.next()?;
    let a = w.strip_suffix("/32").unwrap_or(w);
    let a: Ipv4Addr = a.parse().map_err(|_| format!("bad address {w:?}"))?;
    let port = if t.eat("port") { Some(num(t.next()?)?) } else { None };
    Ok((a, port))
}

fn parse_table(t: &mut Toks, tables: &mut HashMap<String, TableDef>) -> Result<(), String> {
    let w = t.next()?;
    let name = w
        .strip_prefix('<')
        .and_then(|x| x.strip_suffix('>'))
        .ok_or("bad table name")?;
    t.eat("persist");
    t.eat("const");
    let def = if t.eat("file") {
        TableDef::File(t.next()?.trim_matches('"').to_string())
    } else {
        t.expect("{")?;
        let mut cs = Vec::new();
        loop {
            let w = t.next()?;
            if w == "}" {
                break;
            }
            for part in w.split(',').filter(|p| !p.is_empty()) {
                cs.push(part.parse::<Cidr>()?);
            }
        }
        TableDef::Inline(cs)
    };
    t.done()?;
    tables.insert(name.to_string(), def);
    Ok(())
}

struct Parsed {
    rdr: Vec<NatLine>,
    nat: Vec<NatLine>,
    filter: Vec<FilterLine>,
    tables: HashMap<String, TableDef>,
}

fn parse_line(d: Dialect, text: &str, n: usize, p: &mut Parsed) -> Result<(), String> {
    let mut t = Toks {
        t: tokenize(text),
        i: 0,
    };
    let kw = t.next()?;
    match (d, kw) {
        (Dialect::Pf, "table") => return parse_table(&mut t, &mut p.tables),
        (Dialect::Pf, "no") => {
            let which = t.next()?;
            let mut c = Cond::default();
            parse_match(&mut t, &mut c)?;
            t.done()?;
            let line = NatLine {
                action: NatAction::Exempt,
                cond: c,
            };
            match which {
                "nat" => p.nat.push(line),
                "rdr" => p.rdr.push(line),
                _ => return Err("expected nat or rdr after no".into()),
            }
            return Ok(());
        }
        (_, "nat" | "rdr" | "map") => {
            let mut c = Cond::default();
            let is_src = match (d, kw) {
                (Dialect::Pf, "nat") | (Dialect::Ipf, "map") => true,
                (_, "rdr") => false,
                _ => return Err(format!("{kw} is not a keyword of this dialect")),
            };
            if d == Dialect::Ipf {
                c.iface = Some(t.next()?.to_string());
            }
            parse_match(&mut t, &mut c)?;
            let (a, port) = parse_redirect(&mut t)?;
            t.done()?;
            let action = if is_src {
                NatAction::Src(Some(a), port)
            } else {
                NatAction::Dst(Some(a), port)
            };
            let line = NatLine { action, cond: c };
            if is_src {
                p.nat.push(line);
            } else {
                p.rdr.push(line);
            }
            return Ok(());
        }
        _ => {}
    }

    let mut verb = match (d, kw) {
        (_, "pass") => Verb::Pass,
        (_, "block") => Verb::Block,
        (Dialect::Pf, "match") | (Dialect::Ipf, "count") => Verb::Count,
        _ => return Err(format!("unknown keyword {kw:?}")),
    };
    if verb == Verb::Block && (t.eat("return") || t.eat("return-icmp") || t.eat("return-rst")) {
        verb = Verb::Reject;
    }
    let mut c = Cond::default();
    if t.eat("in") {
        c.dir = Some(Direction::Inbound);
    } else if t.eat("out") {
        c.dir = Some(Direction::Outbound);
    } else if d == Dialect::Ipf {
        return Err("expected in or out".into());
    }
    t.eat("log");
    let quick = t.eat("quick");
    parse_match(&mut t, &mut c)?;
    if t.eat("label") {
        t.next()?;
    }
    t.eat("keep");
    t.eat("state");
    t.done()?;
    p.filter.push(FilterLine {
        verb,
        quick,
        cond: c,
        line: n,
    });
    Ok(())
}

pub(super) fn parse(script: &Script, d: Dialect) -> Result<Interpreter, BackendError> {
    let mut p = Parsed {
        rdr: Vec::new(),
        nat: Vec::new(),
        filter: Vec::new(),
        tables: HashMap::new(),
    };
    for (n, text) in script.lines.iter().enumerate() {
        let s = text.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        parse_line(d, s, n, &mut p).map_err(|m| parse_err(n, text, m))?;
    }
    Ok(Interpreter {
        target: d.target(),
        pre_nat: vec![p.rdr, p.nat],
        post_nat: Vec::new(),
        filter: p.filter,
        last_match: true,
        policy: VerdictAction::Accept,
        tables: p.tables,
        origins: script.origins.clone(),
    })
}
