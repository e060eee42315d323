use super::{AddrAtom, Ctx, Elem, RuleKind, SrvAtom, Stage, TransformError};
use crate::model::service::{PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::model::*;

/// Fewest CIDR blocks covering exactly `[first, last]`, ascending.
pub fn range_to_cidrs(first: u32, last: u32) -> Vec<Cidr> {
    assert!(first <= last, "range start after end");
    let mut out = Vec::new();
    let mut lo = u64::from(first);
    let hi = u64::from(last);
    while lo <= hi {
        let mut bits = if lo == 0 { 32 } else { lo.trailing_zeros() };
        while (1u64 << bits) > hi - lo + 1 {
            bits -= 1;
        }
        out.push(Cidr::new(lo as u32, (32 - bits) as u8));
        lo += 1u64 << bits;
    }
    out
}

/// Positive atoms for an address set: one per maximal interval, as a block
/// when it is one, otherwise a range (or its blocks when `ranges` is off).
pub fn set_atoms(set: &AddressSet, ranges: bool) -> Vec<AddrAtom> {
    if set.is_full() {
        return vec![AddrAtom::Any];
    }
    let mut out = Vec::new();
    for &(lo, hi) in set.intervals() {
        match Cidr::from_interval(lo, hi) {
            Some(c) => out.push(AddrAtom::Cidr(c)),
            None if ranges => out.push(AddrAtom::Range(lo, hi)),
            None => out.extend(range_to_cidrs(lo, hi).into_iter().map(AddrAtom::Cidr)),
        }
    }
    out
}

fn port_range(lo: u32, hi: u32) -> PortRange {
    PortRange::new(lo as u16, hi as u16)
}

/// Positive atoms whose union is `set`. Fails when a TCP part restricts
/// flags, which has no single-atom form after set operations.
pub fn service_atoms(set: &ServiceSet) -> Option<Vec<SrvAtom>> {
    if set.is_universal() {
        return Some(vec![SrvAtom::Any]);
    }
    let mut out = Vec::new();
    for (cells, tcp) in [(&set.tcp, true), (&set.udp, false)] {
        for c in cells.cells() {
            if tcp && c.flags != service::ALL_FLAG_COMBOS {
                return None;
            }
            for &(s0, s1) in c.src.intervals() {
                for &(d0, d1) in c.dst.intervals() {
                    let (src, dst) = (port_range(s0, s1), port_range(d0, d1));
                    out.push(if tcp {
                        SrvAtom::Tcp { src, dst, flags: None }
                    } else {
                        SrvAtom::Udp { src, dst }
                    });
                }
            }
        }
    }
    for &(lo, hi) in set.icmp.intervals() {
        if (lo, hi) == (0, service::ICMP_KEY_MAX) {
            out.push(SrvAtom::Icmp {
                icmp_type: None,
                code: None,
            });
            continue;
        }
        let mut k = lo;
        while k <= hi {
            let t = (k / 256) as u8;
            if k % 256 == 0 && k + 255 <= hi {
                out.push(SrvAtom::Icmp {
                    icmp_type: Some(t),
                    code: None,
                });
                k += 256;
            } else {
                out.push(SrvAtom::Icmp {
                    icmp_type: Some(t),
                    code: Some((k % 256) as u8),
                });
                k += 1;
            }
        }
    }
    out.extend(set.ip.iter().map(|p| SrvAtom::Proto(p as u8)));
    Some(out)
}

fn push_unique<T: PartialEq>(v: &mut Vec<T>, x: T) {
    if !v.contains(&x) {
        v.push(x);
    }
}

/// Flattens groups of an address element into atoms: the concrete IP part
/// as disjoint intervals, then special atoms in reference order.
fn address_elem(db: &ObjectDatabase, e: &MatchElement, is_dst: bool) -> Result<Elem<AddrAtom>, ModelError> {
    let mut ip = AddressSet::empty();
    let mut special = Vec::new();
    let mut any = false;
    for r in &e.refs {
        for leaf in db.leaves(r)? {
            match &leaf.kind {
                ObjectKind::AnyAddress => any = true,
                ObjectKind::Interface(itf) if itf.dynamic => push_unique(&mut special, AddrAtom::Dynamic(leaf.name.clone())),
                ObjectKind::AddressTable {
                    load: LoadTime::Deploy,
                    path,
                } => push_unique(
                    &mut special,
                    AddrAtom::Table {
                        id: leaf.id.clone(),
                        path: path.clone(),
                    },
                ),
                // Packets carry no destination MAC, so such members never match.
                ObjectKind::PhysAddress(_) if is_dst => {}
                ObjectKind::PhysAddress(m) => push_unique(&mut special, AddrAtom::Mac(*m)),
                _ => {
                    let t = db.leaf_address_terms(leaf)?;
                    if let Some((id, reason)) = t.opaque.into_iter().next() {
                        return Err(ModelError::OpaqueSet { id, reason });
                    }
                    ip = ip.union(&t.ip);
                }
            }
        }
    }
    let atoms = if any {
        vec![AddrAtom::Any]
    } else {
        let mut a = if ip.is_empty() { Vec::new() } else { set_atoms(&ip, true) };
        a.extend(special);
        a
    };
    Ok(Elem {
        atoms,
        negated: e.negated,
    })
}

pub(super) fn service_elem(db: &ObjectDatabase, e: &MatchElement) -> Result<Elem<SrvAtom>, ModelError> {
    let mut atoms = Vec::new();
    for r in &e.refs {
        for leaf in db.leaves(r)? {
            let new = match &leaf.kind {
                ObjectKind::AnyService => vec![SrvAtom::Any],
                ObjectKind::TcpService(s) => vec![SrvAtom::Tcp {
                    src: s.src,
                    dst: s.dst,
                    flags: s.flags,
                }],
                ObjectKind::UdpService(s) => vec![SrvAtom::Udp { src: s.src, dst: s.dst }],
                ObjectKind::IcmpService(s) if s.icmp_type.is_none() && s.code.is_some() => {
                    service_atoms(&db.leaf_service_set(leaf)?).expect("ICMP sets have no flags")
                }
                ObjectKind::IcmpService(s) => vec![SrvAtom::Icmp {
                    icmp_type: s.icmp_type,
                    code: s.code,
                }],
                ObjectKind::IpService(s) => vec![match s.protocol {
                    PROTO_TCP => SrvAtom::Tcp {
                        src: PortRange::ANY,
                        dst: PortRange::ANY,
                        flags: None,
                    },
                    PROTO_UDP => SrvAtom::Udp {
                        src: PortRange::ANY,
                        dst: PortRange::ANY,
                    },
                    PROTO_ICMP => SrvAtom::Icmp {
                        icmp_type: None,
                        code: None,
                    },
                    p => SrvAtom::Proto(p),
                }],
                k => {
                    return Err(ModelError::WrongType {
                        id: leaf.id.clone(),
                        expected: "service object",
                        found: k.type_name(),
                    })
                }
            };
            for a in new {
                push_unique(&mut atoms, a);
            }
        }
    }
    if atoms.contains(&SrvAtom::Any) {
        atoms = vec![SrvAtom::Any];
    }
    Ok(Elem {
        atoms,
        negated: e.negated,
    })
}

fn itf_elem(db: &ObjectDatabase, e: &MatchElement) -> Result<Elem<Option<String>>, ModelError> {
    let mut atoms = Vec::new();
    for r in &e.refs {
        for leaf in db.leaves(r)? {
            match &leaf.kind {
                ObjectKind::AnyAddress => atoms = vec![None],
                ObjectKind::Interface(_) => {
                    if atoms != [None] {
                        push_unique(&mut atoms, Some(leaf.name.clone()))
                    }
                }
                k => {
                    return Err(ModelError::WrongType {
                        id: leaf.id.clone(),
                        expected: "interface",
                        found: k.type_name(),
                    })
                }
            }
        }
    }
    Ok(Elem {
        atoms,
        negated: e.negated,
    })
}

pub(super) fn when_elem(db: &ObjectDatabase, e: &MatchElement) -> Result<Elem<Option<TimeInterval>>, ModelError> {
    let mut atoms = Vec::new();
    for r in &e.refs {
        for leaf in db.leaves(r)? {
            match &leaf.kind {
                ObjectKind::AnyInterval => atoms = vec![None],
                ObjectKind::Interval(iv) if iv.is_unrestricted() => atoms = vec![None],
                ObjectKind::Interval(iv) => {
                    if atoms != [None] {
                        push_unique(&mut atoms, Some(iv.clone()))
                    }
                }
                k => {
                    return Err(ModelError::WrongType {
                        id: leaf.id.clone(),
                        expected: "time interval",
                        found: k.type_name(),
                    })
                }
            }
        }
    }
    Ok(Elem {
        atoms,
        negated: e.negated,
    })
}

pub(super) fn flatten_policy_rule(r: &PolicyRule, ctx: &Ctx) -> Result<Stage, TransformError> {
    let db = ctx.db;
    Ok(Stage {
        origin: r.position,
        kind: RuleKind::Filter,
        action: r.action,
        direction: Some(r.direction),
        itf: itf_elem(db, &r.itf)?,
        src: address_elem(db, &r.src, false)?,
        dst: address_elem(db, &r.dst, true)?,
        srv: service_elem(db, &r.srv)?,
        when: when_elem(db, &r.when)?,
        tsrc: None,
        tdst: None,
        tport: None,
    })
}

/// Original source, destination, service and time of a NAT rule.
pub(super) type NatMatch = (Elem<AddrAtom>, Elem<AddrAtom>, Elem<SrvAtom>, Elem<Option<TimeInterval>>);

pub(super) fn nat_match_elems(
    r: &NatRule,
    ctx: &Ctx,
) -> Result<NatMatch, TransformError> {
    let db = ctx.db;
    Ok((
        address_elem(db, &r.osrc, false)?,
        address_elem(db, &r.odst, true)?,
        service_elem(db, &r.osrv)?,
        when_elem(db, &r.when)?,
    ))
}

enum Negated<T> {
    /// Keep the element as is, emitted natively.
    Native,
    /// Keep it negated, with its atoms replaced by this one.
    NativeAs(T),
    /// Replace by these positive atoms.
    Positive(Vec<T>),
}

fn negate_address(e: &Elem<AddrAtom>, s: &Stage, ctx: &Ctx) -> Result<Negated<AddrAtom>, TransformError> {
    let caps = &ctx.caps;
    if e.atoms.is_empty() {
        // Negation of nothing: every address.
        return Ok(Negated::Positive(vec![AddrAtom::Any]));
    }
    if e.atoms.contains(&AddrAtom::Any) {
        return Ok(Negated::Positive(Vec::new()));
    }
    let macs = e.atoms.iter().filter(|a| matches!(a, AddrAtom::Mac(_))).count();
    if macs > 0 && macs < e.atoms.len() {
        return Err(ctx.unsupported(
            "mixed-layer-negation",
            Some(s.origin),
            "negated element mixes IP and MAC addresses",
        ));
    }
    if macs > 1 {
        return Err(ctx.unsupported("mac-negation", Some(s.origin), "negation of several MAC addresses"));
    }
    if let [a] = e.atoms.as_slice() {
        let native = matches!(
            a,
            AddrAtom::Cidr(_) | AddrAtom::Mac(_) | AddrAtom::Dynamic(_) | AddrAtom::Table { .. }
        );
        if native && caps.supports_single_negation {
            return Ok(Negated::Native);
        }
    }
    let mut set = AddressSet::empty();
    for a in &e.atoms {
        match a {
            AddrAtom::Cidr(c) => set = set.union(&AddressSet::cidr(*c)),
            AddrAtom::Range(lo, hi) => set = set.union(&AddressSet::range(*lo, *hi)),
            AddrAtom::Dynamic(i) => {
                return Err(ModelError::OpaqueSet {
                    id: ObjectId::new(i.as_str()),
                    reason: "dynamic interface address cannot be complemented here".to_string(),
                }
                .into())
            }
            AddrAtom::Table { id, .. } => {
                return Err(ModelError::OpaqueSet {
                    id: id.clone(),
                    reason: "deploy-time address table cannot be complemented here".to_string(),
                }
                .into())
            }
            AddrAtom::Mac(_) => {
                return Err(ctx.unsupported("mac-negation", Some(s.origin), "MAC negation on this target"))
            }
            AddrAtom::Any | AddrAtom::Set(_) => unreachable!("not produced before negation"),
        }
    }
    if caps.supports_group_negation {
        let cidrs = set
            .intervals()
            .iter()
            .flat_map(|&(lo, hi)| range_to_cidrs(lo, hi))
            .collect();
        return Ok(Negated::NativeAs(AddrAtom::Set(cidrs)));
    }
    let comp = set.complement();
    Ok(Negated::Positive(if comp.is_empty() {
        Vec::new()
    } else {
        set_atoms(&comp, caps.supports_address_ranges)
    }))
}

fn negate_service(e: &Elem<SrvAtom>, s: &Stage, ctx: &Ctx) -> Result<Vec<SrvAtom>, TransformError> {
    let flags = || ctx.unsupported("service-negation-flags", Some(s.origin), "negated service with TCP flags");
    if e.atoms.iter().any(|a| matches!(a, SrvAtom::Tcp { flags: Some(_), .. })) {
        return Err(flags());
    }
    let set = e
        .atoms
        .iter()
        .fold(ServiceSet::empty(), |acc, a| acc.union(&a.service_set()));
    service_atoms(&set.complement()).ok_or_else(flags)
}

fn apply<T>(e: &mut Elem<T>, n: Negated<T>) {
    match n {
        Negated::Native => {}
        Negated::NativeAs(a) => e.atoms = vec![a],
        Negated::Positive(atoms) => {
            e.atoms = atoms;
            e.negated = false;
        }
    }
}

/// Rewrites negated elements into a form the target can emit; rules whose
/// element ends up empty are dropped with a warning.
pub(super) fn expand_negation(rules: Vec<Stage>, ctx: &mut Ctx) -> Result<Vec<Stage>, TransformError> {
    let mut kept = Vec::with_capacity(rules.len());
    for mut r in rules {
        if r.src.negated {
            let n = negate_address(&r.src, &r, ctx)?;
            apply(&mut r.src, n);
        }
        if r.dst.negated {
            let n = negate_address(&r.dst, &r, ctx)?;
            apply(&mut r.dst, n);
        }
        if r.srv.negated {
            let atoms = negate_service(&r.srv, &r, ctx)?;
            apply(&mut r.srv, Negated::Positive(atoms));
        }
        if r.itf.negated {
            let names = if r.itf.atoms.contains(&None) {
                Vec::new()
            } else {
                ctx.interfaces
                    .iter()
                    .filter(|n| !r.itf.atoms.contains(&Some((*n).clone())))
                    .map(|n| Some(n.clone()))
                    .collect()
            };
            apply(&mut r.itf, Negated::Positive(names));
        }
        if r.when.negated {
            let code = if ctx.caps.supports_time { "time-negation" } else { "time" };
            return Err(ctx.unsupported(code, Some(r.origin), "negated time interval"));
        }
        let empty = [r.src.atoms.is_empty(), r.dst.atoms.is_empty(), r.srv.atoms.is_empty(), r.itf.atoms.is_empty(), r.when.atoms.is_empty()];
        if let Some(i) = empty.iter().position(|e| *e) {
            let field = ["source", "destination", "service", "interface", "time"][i];
            ctx.drop_rule(&r, &format!("empty {field}"));
            continue;
        }
        kept.push(r);
    }
    let rules = super::split_on(kept, |s| &mut s.itf);
    let rules = super::split_on(rules, |s| &mut s.src);
    let rules = super::split_on(rules, |s| &mut s.dst);
    Ok(super::split_on(rules, |s| &mut s.srv))
}
