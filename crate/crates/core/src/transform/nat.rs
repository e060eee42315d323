use super::atoms::{nat_match_elems, set_atoms};
use super::{AddrAtom, AddrMatch, Ctx, Elem, FlatRule, RuleKind, Stage, TransformError};
use crate::model::*;
use std::net::Ipv4Addr;

fn translation(id: &Option<ObjectId>) -> Option<&ObjectId> {
    id.as_ref().filter(|i| !i.is_any())
}

pub(super) fn flatten_nat_rule(r: &NatRule, ctx: &Ctx) -> Result<Stage, TransformError> {
    let db = ctx.db;
    let target = ctx.caps.target;
    let origin = Some(r.position);
    let tsrc = translation(&r.tsrc).map(|id| db.single_address_of(id).map(Ipv4Addr::from)).transpose()?;
    let tdst = translation(&r.tdst).map(|id| db.single_address_of(id).map(Ipv4Addr::from)).transpose()?;
    let tport = translation(&r.tsrv)
        .map(|id| db.port_rewrite_of(id))
        .transpose()?
        .filter(|p| p.src_port.is_some() || p.dst_port.is_some());

    let snat = tsrc.is_some() || tport.is_some_and(|p| p.src_port.is_some());
    let dnat = tdst.is_some() || tport.is_some_and(|p| p.dst_port.is_some());
    let kind = match (snat, dnat) {
        (true, true) => {
            return Err(ctx.unsupported(
                "nat-double",
                origin,
                "rule translates both source and destination",
            ))
        }
        (true, false) => RuleKind::Snat,
        (false, true) => RuleKind::Dnat,
        (false, false) => RuleKind::NoNat,
    };
    let port_only = match kind {
        RuleKind::Snat => tsrc.is_none(),
        RuleKind::Dnat => tdst.is_none(),
        _ => false,
    };
    if kind == RuleKind::Snat && tport.is_some() && target == Platform::Iptables {
        return Err(ctx.unsupported(
            "nat-snat-port",
            origin,
            "source port translation happens after filtering on iptables",
        ));
    }
    if port_only && target != Platform::Iptables {
        return Err(ctx.unsupported(
            "nat-port-without-address",
            origin,
            "port translation needs a translated address on this target",
        ));
    }

    let (src, dst, srv, when) = nat_match_elems(r, ctx)?;
    if src.atoms.iter().any(|a| matches!(a, AddrAtom::Mac(_))) {
        return Err(ctx.unsupported("nat-mac", origin, "MAC address in a NAT rule"));
    }
    Ok(Stage {
        origin: r.position,
        kind,
        action: Action::Accept,
        direction: None,
        itf: Elem {
            atoms: vec![None],
            negated: false,
        },
        src,
        dst,
        srv,
        when,
        tsrc,
        tdst,
        tport,
    })
}

/// Restrictions that involve several NAT rules at once.
pub(super) fn check_nat(rules: &[Stage], ctx: &Ctx) -> Result<(), TransformError> {
    let caps = &ctx.caps;
    let has = |k: RuleKind| rules.iter().find(|r| r.kind == k);
    if let (Some(_), Some(d)) = (has(RuleKind::Snat), has(RuleKind::Dnat)) {
        if !caps.supports_mixed_nat {
            return Err(ctx.unsupported(
                "nat-mixed",
                Some(d.origin),
                "source and destination translations in one firewall",
            ));
        }
    }
    if let Some(n) = has(RuleKind::NoNat) {
        if !caps.supports_nat_exemption {
            return Err(ctx.unsupported("nat-exemption", Some(n.origin), "NAT rule without translation"));
        }
    }
    if caps.target == Platform::Iptables && has(RuleKind::Snat).is_some() {
        // SNAT happens after filtering; the filter rewrite below only
        // accounts for translations that depend on the source alone.
        let any_addr = |e: &Elem<AddrAtom>| e.atoms == [AddrAtom::Any] && !e.negated;
        if let Some(r) = rules.iter().find(|r| {
            !any_addr(&r.dst) || r.srv.negated || r.srv.atoms != [super::SrvAtom::Any] || r.when.atoms != [None]
        }) {
            return Err(ctx.unsupported(
                "nat-snat-match",
                Some(r.origin),
                "with source translation, NAT rules may only match on the original source",
            ));
        }
    }
    Ok(())
}

/// Rewrites filter sources so that filtering before SNAT decides like the
/// abstract model, which filters the translated packet.
///
/// With `E_k` the original sources first matched by NAT rule `k`, a filter
/// source `S` becomes the union of `E_k` for SNAT rules translating into `S`,
/// `E_k ∩ S` for rules that keep the source, and `S` minus every original
/// source.
pub fn adjust_for_iptables_nat_order(
    filter: Vec<FlatRule>,
    nat_rules: &[NatRule],
    db: &ObjectDatabase,
) -> Result<Vec<FlatRule>, TransformError> {
    let unsupported = |code, origin, what: &str| TransformError::Unsupported {
        target: Platform::Iptables,
        code,
        message: match origin {
            Some(p) => format!("rule {p}: {what}"),
            None => what.to_string(),
        },
    };
    let mut covered = AddressSet::empty();
    let mut parts: Vec<(AddressSet, Option<u32>)> = Vec::new();
    for r in nat_rules.iter().filter(|r| !r.disabled) {
        let t = db.address_terms(&r.osrc.refs)?;
        if let Some((id, reason)) = t.opaque.into_iter().next() {
            return Err(ModelError::OpaqueSet { id, reason }.into());
        }
        if !t.macs.is_empty() {
            return Err(unsupported("nat-mac", Some(r.position), "MAC address in a NAT rule"));
        }
        let osrc = if r.osrc.negated { t.ip.complement() } else { t.ip };
        let tsrc = translation(&r.tsrc).map(|id| db.single_address_of(id)).transpose()?;
        parts.push((osrc.difference(&covered), tsrc));
        covered = covered.union(&osrc);
    }
    if parts.iter().all(|(_, t)| t.is_none()) {
        return Ok(filter);
    }

    let mut out = Vec::with_capacity(filter.len());
    for r in filter {
        let s = match &r.src.atom {
            AddrAtom::Mac(_) => None,
            AddrAtom::Dynamic(i) => {
                return Err(unsupported(
                    "dynamic-interface-address",
                    r.origin,
                    &format!("no way to refer to the address of dynamic interface {i}"),
                ))
            }
            AddrAtom::Table { id, .. } => {
                return Err(unsupported(
                    "deploy-time-table",
                    r.origin,
                    &format!("address table {id} is loaded at deploy time"),
                ))
            }
            _ => r.src.ip_set(),
        };
        let Some(s) = s else {
            out.push(r);
            continue;
        };
        let mut adjusted = s.difference(&covered);
        for (e, tsrc) in &parts {
            adjusted = adjusted.union(&match tsrc {
                Some(a) if s.contains(*a) => e.clone(),
                Some(_) => AddressSet::empty(),
                None => e.intersect(&s),
            });
        }
        if adjusted == s {
            out.push(r);
            continue;
        }
        for atom in if adjusted.is_empty() { Vec::new() } else { set_atoms(&adjusted, true) } {
            out.push(FlatRule {
                src: AddrMatch::pos(atom),
                ..r.clone()
            });
        }
    }
    Ok(out)
}
