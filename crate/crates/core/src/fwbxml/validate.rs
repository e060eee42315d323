use crate::diag::Diagnostic;
use crate::model::service::{PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::model::sets::mask_prefix;
use crate::model::*;
use std::collections::BTreeMap;

/// Semantic checks on a parsed database. Returns no errors iff every
/// reference resolves, groups are homogeneous and acyclic, rule positions
/// are unique and gapless from 0, rule fields reference objects of the
/// right kind, NAT translations are well formed and every firewall
/// targets a supported platform.
pub fn validate_schema(db: &ObjectDatabase) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for o in db.objects() {
        check_object(db, o, &mut out);
    }
    for (o, fw) in db.firewalls() {
        check_firewall(db, o, fw, &mut out);
    }
    out
}

fn object_path(o: &Object) -> String {
    format!("{}[{}]", o.kind.type_name(), o.name)
}

fn model_error(code_hint: &'static str, path: &str, e: &ModelError) -> Diagnostic {
    let code = match e {
        ModelError::UnknownId(_) => "dangling-ref",
        ModelError::CyclicGroup(_) => "group-cycle",
        _ => code_hint,
    };
    Diagnostic::error(code, path, e.to_string())
}

fn check_object(db: &ObjectDatabase, o: &Object, out: &mut Vec<Diagnostic>) {
    let path = object_path(o);
    let err = |code, msg: String| Diagnostic::error(code, &path, msg).with_id(&o.id);
    match &o.kind {
        ObjectKind::Network { netmask, .. } | ObjectKind::Ipv4 { netmask, .. } => {
            if mask_prefix(u32::from(*netmask)).is_none() {
                out.push(err("bad-netmask", format!("netmask {netmask} is not contiguous")));
            }
        }
        ObjectKind::AddressRange { start, end } if start > end => {
            out.push(err("range-order", format!("range start {start} is after end {end}")));
        }
        ObjectKind::IpService(s) => {
            if [PROTO_ICMP, PROTO_TCP, PROTO_UDP].contains(&s.protocol) {
                out.push(err(
                    "ip-service-protocol",
                    format!("protocol {} must be described with its dedicated service type", s.protocol),
                ));
            }
            if s.lsrr || s.rr {
                out.push(
                    Diagnostic::warning(
                        "ip-options-ignored",
                        &path,
                        "IP options (lsrr, rr) are not matched by the compiler and are ignored",
                    )
                    .with_id(&o.id),
                );
            }
        }
        ObjectKind::TcpService(s) => {
            check_ports(o, s.src, s.dst, out);
            if let Some(f) = s.flags {
                if f.set.bits() & !f.mask.bits() != 0 {
                    out.push(err("tcp-flags", "flags_set must be a subset of flags_mask".into()));
                }
            }
        }
        ObjectKind::UdpService(s) => check_ports(o, s.src, s.dst, out),
        ObjectKind::Interface(itf) => {
            if itf.dynamic && !itf.addresses.is_empty() {
                out.push(err(
                    "dynamic-interface-addresses",
                    "a dynamic interface cannot have static addresses".into(),
                ));
            }
        }
        ObjectKind::Group { members } => {
            let mut cats = BTreeMap::new();
            for m in members {
                match db.category_of(m) {
                    Ok(Some(c)) => {
                        cats.entry(format!("{c:?}")).or_insert(m.clone());
                    }
                    Ok(None) => {}
                    Err(e) => {
                        out.push(model_error("dangling-ref", &path, &e).with_id(&o.id));
                        return;
                    }
                }
            }
            if cats.len() > 1 {
                let kinds: Vec<_> = cats.keys().map(|k| k.to_lowercase()).collect();
                out.push(err(
                    "group-heterogeneous",
                    format!("group mixes {} objects", kinds.join(" and ")),
                ));
            }
            if members.is_empty() {
                out.push(Diagnostic::warning("empty-group", &path, "group has no members").with_id(&o.id));
            }
        }
        _ => {}
    }
}

fn check_ports(o: &Object, src: PortRange, dst: PortRange, out: &mut Vec<Diagnostic>) {
    for (which, r) in [("source", src), ("destination", dst)] {
        if r.start > r.end {
            out.push(
                Diagnostic::error(
                    "port-range",
                    object_path(o),
                    format!("{which} port range {}-{} is inverted", r.start, r.end),
                )
                .with_id(&o.id),
            );
        }
    }
}

fn check_positions(path: &str, positions: impl Iterator<Item = (u32, ObjectId)>, out: &mut Vec<Diagnostic>) {
    let mut seen: BTreeMap<u32, ObjectId> = BTreeMap::new();
    for (p, id) in positions {
        if let Some(first) = seen.get(&p) {
            out.push(
                Diagnostic::error(
                    "duplicate-position",
                    path,
                    format!("rules {first} and {id} both have position {p}"),
                )
                .with_id(&id),
            );
        } else {
            seen.insert(p, id);
        }
    }
    for (expected, (&p, id)) in seen.iter().enumerate() {
        if p != expected as u32 {
            out.push(
                Diagnostic::error(
                    "position-gap",
                    path,
                    format!("positions must run 0, 1, 2, ... without gaps; found {p} where {expected} was expected"),
                )
                .with_id(id),
            );
            break;
        }
    }
}

#[derive(Clone, Copy)]
enum Field {
    Src,
    Dst,
    Srv,
    Itf,
    When,
}

impl Field {
    fn wants(self) -> Category {
        match self {
            Field::Srv => Category::Service,
            Field::When => Category::Interval,
            _ => Category::Address,
        }
    }
}

fn check_element(
    db: &ObjectDatabase,
    fw_id: &ObjectId,
    path: &str,
    field: Field,
    e: &MatchElement,
    out: &mut Vec<Diagnostic>,
) {
    if e.refs.is_empty() {
        out.push(Diagnostic::error("empty-element", path, "rule field has no references"));
        return;
    }
    for r in &e.refs {
        match db.category_of(r) {
            Err(err) => {
                out.push(model_error("dangling-ref", path, &err).with_id(r));
                continue;
            }
            Ok(Some(c)) if c != field.wants() => {
                out.push(
                    Diagnostic::error(
                        "element-type",
                        path,
                        format!("{r} is a {c:?} object, expected {:?}", field.wants()),
                    )
                    .with_id(r),
                );
                continue;
            }
            _ => {}
        }
        let Ok(leaves) = db.leaves(r) else { continue };
        for leaf in leaves {
            match (field, &leaf.kind) {
                (Field::Itf, ObjectKind::AnyAddress) => {}
                (Field::Itf, ObjectKind::Interface(_)) if leaf.parent.as_ref() == Some(fw_id) => {}
                (Field::Itf, _) => out.push(
                    Diagnostic::error(
                        "element-type",
                        path,
                        format!("{} is not an interface of this firewall", leaf.id),
                    )
                    .with_id(&leaf.id),
                ),
                (Field::Dst, ObjectKind::PhysAddress(_)) => out.push(
                    Diagnostic::error(
                        "mac-in-dst",
                        path,
                        "MAC addresses can only be matched as a source",
                    )
                    .with_id(&leaf.id),
                ),
                _ => {}
            }
        }
    }
}

fn check_firewall(db: &ObjectDatabase, o: &Object, fw: &Firewall, out: &mut Vec<Diagnostic>) {
    let path = object_path(o);
    if let Err(e) = fw.platform() {
        out.push(Diagnostic::error("unsupported-platform", &path, e).with_id(&o.id));
    }
    if fw.interfaces.is_empty() {
        out.push(Diagnostic::error("firewall-no-interface", &path, "firewall has no interfaces").with_id(&o.id));
    }
    if let Some(p) = &fw.policy {
        let ppath = format!("{path}/Policy");
        check_positions(&ppath, p.rules.iter().map(|r| (r.position, r.id.clone())), out);
        for r in &p.rules {
            let rpath = format!("{ppath}/PolicyRule[{}]", r.position);
            for (tag, field, e) in [
                ("Src", Field::Src, &r.src),
                ("Dst", Field::Dst, &r.dst),
                ("Srv", Field::Srv, &r.srv),
                ("Itf", Field::Itf, &r.itf),
                ("When", Field::When, &r.when),
            ] {
                check_element(db, &o.id, &format!("{rpath}/{tag}"), field, e, out);
            }
        }
    }
    if let Some(n) = &fw.nat {
        let npath = format!("{path}/NAT");
        check_positions(&npath, n.rules.iter().map(|r| (r.position, r.id.clone())), out);
        for r in &n.rules {
            let rpath = format!("{npath}/NATRule[{}]", r.position);
            for (tag, field, e) in [
                ("OSrc", Field::Src, &r.osrc),
                ("ODst", Field::Dst, &r.odst),
                ("OSrv", Field::Srv, &r.osrv),
                ("When", Field::When, &r.when),
            ] {
                check_element(db, &o.id, &format!("{rpath}/{tag}"), field, e, out);
            }
            check_nat_targets(db, &rpath, r, out);
        }
    }
}

fn check_nat_targets(db: &ObjectDatabase, rpath: &str, r: &NatRule, out: &mut Vec<Diagnostic>) {
    for (tag, t) in [("TSrc", &r.tsrc), ("TDst", &r.tdst)] {
        if let Some(id) = t {
            if let Err(e) = db.single_address_of(id) {
                out.push(
                    Diagnostic::error(
                        "nat-translation-address",
                        format!("{rpath}/{tag}"),
                        format!("translation must be a single known address: {e}"),
                    )
                    .with_id(id),
                );
            }
        }
    }
    let Some(id) = &r.tsrv else { return };
    let tpath = format!("{rpath}/TSrv");
    match db.port_rewrite_of(id) {
        Err(e) => out.push(
            Diagnostic::error(
                "nat-translation-service",
                &tpath,
                format!("translated service must be TCP or UDP with single ports: {e}"),
            )
            .with_id(id),
        ),
        Ok(rw) => {
            let mismatch = r.osrv.negated
                || match db.service_protocols(&r.osrv.refs) {
                    Ok(protos) => protos.iter().any(|&p| p != rw.protocol),
                    Err(_) => false,
                };
            if mismatch {
                out.push(
                    Diagnostic::error(
                        "nat-service-mismatch",
                        &tpath,
                        "original service must use the same protocol as the translated service",
                    )
                    .with_id(id),
                );
            }
        }
    }
}
