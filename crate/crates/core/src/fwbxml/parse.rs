use super::ParseError;
use crate::diag::Diagnostic;
use crate::model::sets::{mask_prefix, prefix_mask};
use crate::model::time::{parse_datetime, parse_minute};
use crate::model::*;
use roxmltree::Node;
use std::collections::HashSet;
use std::net::Ipv4Addr;

type Result<T> = std::result::Result<T, ParseError>;

/// Parses a `.fwb` document into an object database.
pub fn parse(text: &str) -> Result<ObjectDatabase> {
    parse_with_diagnostics(text).map(|(db, _)| db)
}

/// Like [`parse`], also returning grammar-level warnings such as unknown
/// attributes.
pub fn parse_with_diagnostics(text: &str) -> Result<(ObjectDatabase, Vec<Diagnostic>)> {
    let doc = roxmltree::Document::parse(text).map_err(|e| ParseError::Xml(e.to_string()))?;
    let root = doc.root_element();
    let mut p = Parser {
        builder: DbBuilder::bare(),
        warnings: Vec::new(),
        other_ids: HashSet::new(),
        refs: Vec::new(),
    };
    if root.tag_name().name() != "FWObjectDatabase" {
        return Err(schema("/", format!("root element must be FWObjectDatabase, found {}", root.tag_name().name())));
    }
    let path = "/FWObjectDatabase".to_string();
    p.attrs(root, &path, &[], &["version"])?;
    for child in elements(root) {
        match child.tag_name().name() {
            "Library" => p.library(child, &path)?,
            other => return Err(schema(&path, format!("unexpected element <{other}>"))),
        }
    }
    p.builder.ensure_standard_library();
    let db = p.builder.build();
    for (id, path) in &p.refs {
        if db.get(id).is_none() {
            return Err(ParseError::DanglingRef {
                id: id.clone(),
                path: path.clone(),
            });
        }
    }
    Ok((db, p.warnings))
}

fn schema(path: &str, message: impl Into<String>) -> ParseError {
    ParseError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

fn elements<'a, 'i>(n: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    n.children().filter(|c| c.is_element())
}

struct Parser {
    builder: DbBuilder,
    warnings: Vec<Diagnostic>,
    /// Ids of policies, rule sets and rules, which are not objects.
    other_ids: HashSet<ObjectId>,
    /// Every reference seen, with its location, for the dangling check.
    refs: Vec<(ObjectId, String)>,
}

/// Attribute accessor bound to one element.
struct Attrs<'a, 'i> {
    node: Node<'a, 'i>,
    path: String,
}

impl Attrs<'_, '_> {
    fn opt(&self, name: &str) -> Option<&str> {
        self.node.attribute(name)
    }

    fn req(&self, name: &str) -> Result<&str> {
        self.opt(name)
            .ok_or_else(|| schema(&self.path, format!("missing required attribute {name:?}")))
    }

    fn parse_with<T>(&self, name: &str, v: &str, f: impl FnOnce(&str) -> std::result::Result<T, String>) -> Result<T> {
        f(v).map_err(|e| schema(&self.path, format!("attribute {name:?}: {e}")))
    }

    fn req_parse<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let v = self.req(name)?;
        v.parse()
            .map_err(|_| schema(&self.path, format!("attribute {name:?} has invalid value {v:?}")))
    }

    fn ipv4(&self, name: &str) -> Result<Ipv4Addr> {
        self.req_parse(name)
    }

    fn bool_or(&self, name: &str, default: bool) -> Result<bool> {
        match self.opt(name) {
            None => Ok(default),
            Some(v) => parse_bool(v).ok_or_else(|| {
                schema(&self.path, format!("attribute {name:?} must be True or False, got {v:?}"))
            }),
        }
    }

    fn opt_bool(&self, name: &str) -> Result<Option<bool>> {
        self.opt(name).map(|_| self.bool_or(name, false)).transpose()
    }

    fn comment(&self) -> Option<String> {
        self.opt("comment").map(str::to_string)
    }
}

pub(crate) fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "True" | "true" | "1" => Some(true),
        "False" | "false" | "0" => Some(false),
        _ => None,
    }
}

const OBJ_ATTRS: [&str; 2] = ["id", "name"];

impl Parser {
    /// Checks required attributes are present and warns on unknown ones.
    fn attrs<'a, 'i>(&mut self, n: Node<'a, 'i>, path: &str, required: &[&str], optional: &[&str]) -> Result<Attrs<'a, 'i>> {
        for r in required {
            if n.attribute(*r).is_none() {
                return Err(schema(path, format!("missing required attribute {r:?}")));
            }
        }
        for a in n.attributes() {
            let name = a.name();
            if !required.contains(&name) && !optional.contains(&name) {
                self.warnings.push(Diagnostic::warning(
                    "unknown-attribute",
                    path,
                    format!("attribute {name:?} on <{}> is not recognised and was ignored", n.tag_name().name()),
                ));
            }
        }
        Ok(Attrs {
            node: n,
            path: path.to_string(),
        })
    }

    fn claim_other_id(&mut self, id: &ObjectId, path: &str) -> Result<()> {
        if self.builder.contains(id) || !self.other_ids.insert(id.clone()) {
            return Err(ParseError::DuplicateId {
                id: id.clone(),
                path: path.to_string(),
            });
        }
        Ok(())
    }

    fn insert(&mut self, lib: Option<&ObjectId>, obj: Object, path: &str) -> Result<ObjectId> {
        if self.other_ids.contains(&obj.id) {
            return Err(ParseError::DuplicateId {
                id: obj.id,
                path: path.to_string(),
            });
        }
        let r = match lib {
            Some(l) => self.builder.add(l, obj),
            None => self.builder.add_embedded(obj),
        };
        r.map_err(|e| match e {
            ModelError::DuplicateId(id) => ParseError::DuplicateId {
                id,
                path: path.to_string(),
            },
            other => schema(path, other.to_string()),
        })
    }

    fn library(&mut self, n: Node, parent: &str) -> Result<()> {
        let id = n.attribute("id").unwrap_or("?");
        let path = format!("{parent}/Library[{id}]");
        let a = self.attrs(n, &path, &OBJ_ATTRS, &["comment"])?;
        let lib_id: ObjectId = a.req("id")?.into();
        self.claim_other_id(&lib_id, &path)?;
        let name = a.req("name")?.to_string();
        let comment = a.comment();
        self.builder.add_library(lib_id.clone(), name, comment);
        for child in elements(n) {
            self.object(child, &path, Some(&lib_id), None)?;
        }
        Ok(())
    }

    /// Parses one object element. `lib` is set for top-level objects,
    /// `parent` for embedded ones.
    fn object(&mut self, n: Node, parent_path: &str, lib: Option<&ObjectId>, parent: Option<&ObjectId>) -> Result<ObjectId> {
        let tag = n.tag_name().name();
        let label = n.attribute("name").or(n.attribute("id")).unwrap_or("?");
        let path = format!("{parent_path}/{tag}[{label}]");
        let kind_attrs: (&[&str], &[&str]) = match tag {
            "AnyNetwork" | "AnyIPService" | "AnyInterval" | "Host" | "Group" => (&[], &[]),
            "Network" | "IPv4" => (&["address", "netmask"], &[]),
            "AddressRange" => (&["start", "end"], &[]),
            "AddressTable" => (&["path", "load"], &[]),
            "physAddress" => (&["address"], &[]),
            "IPService" => (&["protocol"], &["lsrr", "rr"]),
            "TCPService" => (
                &[],
                &[
                    "src_range_start",
                    "src_range_end",
                    "dst_range_start",
                    "dst_range_end",
                    "flags_mask",
                    "flags_set",
                ],
            ),
            "UDPService" => (&[], &["src_range_start", "src_range_end", "dst_range_start", "dst_range_end"]),
            "ICMPService" => (&[], &["type", "code"]),
            "Interval" => (&[], &["start_date", "end_date", "days_of_week", "from_time", "to_time"]),
            "Firewall" => (&["platform"], &["host_OS"]),
            "Interface" => (&[], &["dyn", "unnum", "unprotected"]),
            other => return Err(schema(parent_path, format!("unknown element <{other}>"))),
        };
        let mut required: Vec<&str> = OBJ_ATTRS.to_vec();
        required.extend_from_slice(kind_attrs.0);
        let mut optional = vec!["comment"];
        optional.extend_from_slice(kind_attrs.1);
        let a = self.attrs(n, &path, &required, &optional)?;
        let id: ObjectId = a.req("id")?.into();
        let name = a.req("name")?.to_string();

        let embedded_only = matches!(tag, "Interface");
        if embedded_only && parent.is_none() {
            return Err(schema(&path, "Interface must be embedded in a Host or Firewall"));
        }
        let allowed_children: &[&str] = match tag {
            "Host" => &["Interface"],
            "Firewall" => &["Interface", "Policy", "NAT"],
            "Interface" => &["IPv4", "physAddress"],
            "Group" => &["ObjectRef", "ServiceRef", "IntervalRef"],
            _ => &[],
        };
        for c in elements(n) {
            let ct = c.tag_name().name();
            if !allowed_children.contains(&ct) {
                return Err(schema(&path, format!("element <{ct}> is not allowed inside <{tag}>")));
            }
        }

        let kind = match tag {
            "AnyNetwork" => ObjectKind::AnyAddress,
            "AnyIPService" => ObjectKind::AnyService,
            "AnyInterval" => ObjectKind::AnyInterval,
            "Network" | "IPv4" => {
                let address = a.ipv4("address")?;
                let netmask = a.ipv4("netmask")?;
                let prefix = mask_prefix(u32::from(netmask))
                    .ok_or_else(|| schema(&path, format!("non-contiguous netmask {netmask}")))?;
                if tag == "Network" {
                    ObjectKind::Network {
                        address: (u32::from(address) & prefix_mask(prefix)).into(),
                        netmask,
                    }
                } else {
                    ObjectKind::Ipv4 { address, netmask }
                }
            }
            "AddressRange" => {
                let start = a.ipv4("start")?;
                let end = a.ipv4("end")?;
                if start > end {
                    return Err(schema(&path, format!("range start {start} is after end {end}")));
                }
                ObjectKind::AddressRange { start, end }
            }
            "AddressTable" => {
                let load = match a.req("load")? {
                    "compile" => LoadTime::Compile,
                    "deploy" => LoadTime::Deploy,
                    v => return Err(schema(&path, format!("load must be compile or deploy, got {v:?}"))),
                };
                ObjectKind::AddressTable {
                    path: a.req("path")?.to_string(),
                    load,
                }
            }
            "physAddress" => {
                let v = a.req("address")?;
                ObjectKind::PhysAddress(a.parse_with("address", v, str::parse)?)
            }
            "IPService" => ObjectKind::IpService(IpService {
                protocol: a.req_parse("protocol")?,
                lsrr: a.bool_or("lsrr", false)?,
                rr: a.bool_or("rr", false)?,
            }),
            "TCPService" | "UDPService" => {
                let src = port_range(&a, "src")?;
                let dst = port_range(&a, "dst")?;
                if tag == "UDPService" {
                    ObjectKind::UdpService(UdpService { src, dst })
                } else {
                    let flags = match (a.opt("flags_mask"), a.opt("flags_set")) {
                        (None, None) => None,
                        (m, s) => {
                            let mask = a.parse_with("flags_mask", m.unwrap_or(""), TcpFlags::parse_list)?;
                            let set = a.parse_with("flags_set", s.unwrap_or(""), TcpFlags::parse_list)?;
                            if set.bits() & !mask.bits() != 0 {
                                return Err(schema(&path, "flags_set must be a subset of flags_mask"));
                            }
                            (!mask.is_empty()).then_some(FlagMatch { mask, set })
                        }
                    };
                    ObjectKind::TcpService(TcpService { src, dst, flags })
                }
            }
            "ICMPService" => ObjectKind::IcmpService(IcmpService {
                icmp_type: icmp_field(&a, "type")?,
                code: icmp_field(&a, "code")?,
            }),
            "Interval" => {
                let dt = |name: &str| -> Result<Option<chrono::NaiveDateTime>> {
                    a.opt(name).map(|v| a.parse_with(name, v, parse_datetime)).transpose()
                };
                let min = |name: &str| -> Result<Option<u16>> {
                    a.opt(name).map(|v| a.parse_with(name, v, parse_minute)).transpose()
                };
                ObjectKind::Interval(TimeInterval {
                    start: dt("start_date")?,
                    end: dt("end_date")?,
                    days: a.parse_with("days_of_week", a.opt("days_of_week").unwrap_or(""), Weekdays::parse)?,
                    from: min("from_time")?,
                    to: min("to_time")?,
                })
            }
            "Group" => {
                let mut members = Vec::new();
                for c in elements(n) {
                    members.push(self.reference(c, &path)?);
                }
                ObjectKind::Group { members }
            }
            "Host" => ObjectKind::Host { interfaces: Vec::new() },
            "Firewall" => ObjectKind::Firewall(Box::new(Firewall {
                platform: a.req("platform")?.to_string(),
                host_os: a.opt("host_OS").unwrap_or("").to_string(),
                interfaces: Vec::new(),
                policy: None,
                nat: None,
            })),
            "Interface" => ObjectKind::Interface(Interface {
                dynamic: a.bool_or("dyn", false)?,
                unnumbered: a.bool_or("unnum", false)?,
                unprotected: a.opt_bool("unprotected")?,
                addresses: Vec::new(),
                phys: None,
            }),
            _ => unreachable!("tag checked above"),
        };

        let mut obj = Object::new(id.clone(), name, kind);
        obj.comment = a.comment();
        obj.parent = parent.cloned();

        // Embedded children are parsed first so that their ids are known,
        // then attached to the parent before it is inserted.
        match &mut obj.kind {
            ObjectKind::Host { interfaces } => {
                for c in elements(n) {
                    interfaces.push(self.object(c, &path, None, Some(&id))?);
                }
            }
            ObjectKind::Firewall(fw) => {
                for c in elements(n) {
                    match c.tag_name().name() {
                        "Interface" => fw.interfaces.push(self.object(c, &path, None, Some(&id))?),
                        "Policy" => {
                            if fw.policy.is_some() {
                                return Err(schema(&path, "more than one <Policy>"));
                            }
                            fw.policy = Some(self.policy(c, &path)?);
                        }
                        "NAT" => {
                            if fw.nat.is_some() {
                                return Err(schema(&path, "more than one <NAT>"));
                            }
                            fw.nat = Some(self.nat(c, &path)?);
                        }
                        _ => unreachable!("children checked above"),
                    }
                }
            }
            ObjectKind::Interface(itf) => {
                for c in elements(n) {
                    let cid = self.object(c, &path, None, Some(&id))?;
                    if c.tag_name().name() == "IPv4" {
                        itf.addresses.push(cid);
                    } else if itf.phys.replace(cid).is_some() {
                        return Err(schema(&path, "more than one <physAddress>"));
                    }
                }
            }
            _ => {}
        }
        self.insert(lib, obj, &path)
    }

    fn reference(&mut self, n: Node, path: &str) -> Result<ObjectId> {
        let tag = n.tag_name().name();
        if !matches!(tag, "ObjectRef" | "ServiceRef" | "IntervalRef") {
            return Err(schema(path, format!("expected a reference element, found <{tag}>")));
        }
        let rpath = format!("{path}/{tag}");
        let a = self.attrs(n, &rpath, &["ref"], &[])?;
        let id: ObjectId = a.req("ref")?.into();
        self.refs.push((id.clone(), rpath));
        Ok(id)
    }

    /// A rule field such as `<Src neg="False">` with its references.
    fn element(&mut self, n: Node, path: &str, allow_empty: bool) -> Result<MatchElement> {
        let epath = format!("{path}/{}", n.tag_name().name());
        let a = self.attrs(n, &epath, &[], &["neg"])?;
        let negated = a.bool_or("neg", false)?;
        let mut refs = Vec::new();
        for c in elements(n) {
            refs.push(self.reference(c, &epath)?);
        }
        if refs.is_empty() && !allow_empty {
            return Err(schema(&epath, "rule field must contain at least one reference"));
        }
        Ok(MatchElement { refs, negated })
    }

    fn policy(&mut self, n: Node, parent: &str) -> Result<Policy> {
        let path = format!("{parent}/Policy");
        let a = self.attrs(n, &path, &["id"], &["name", "comment"])?;
        let id: ObjectId = a.req("id")?.into();
        self.claim_other_id(&id, &path)?;
        let mut rules = Vec::new();
        for c in elements(n) {
            if c.tag_name().name() != "PolicyRule" {
                return Err(schema(&path, format!("unexpected element <{}>", c.tag_name().name())));
            }
            rules.push(self.policy_rule(c, &path)?);
        }
        Ok(Policy::new(id, rules))
    }

    fn policy_rule(&mut self, n: Node, parent: &str) -> Result<PolicyRule> {
        let path = format!("{parent}/PolicyRule[{}]", n.attribute("position").unwrap_or("?"));
        let a = self.attrs(
            n,
            &path,
            &["id", "position", "action"],
            &["direction", "disabled", "comment"],
        )?;
        let id: ObjectId = a.req("id")?.into();
        self.claim_other_id(&id, &path)?;
        let mut rule = PolicyRule {
            id,
            position: a.req_parse("position")?,
            action: a.parse_with("action", a.req("action")?, str::parse)?,
            direction: a.parse_with("direction", a.opt("direction").unwrap_or("Both"), str::parse)?,
            disabled: a.bool_or("disabled", false)?,
            comment: a.comment(),
            src: MatchElement::any_address(),
            dst: MatchElement::any_address(),
            srv: MatchElement::any_service(),
            itf: MatchElement::any_address(),
            when: MatchElement::any_interval(),
        };
        let mut seen = HashSet::new();
        for c in elements(n) {
            let tag = c.tag_name().name();
            if !seen.insert(tag) {
                return Err(schema(&path, format!("duplicate <{tag}>")));
            }
            let el = self.element(c, &path, false)?;
            match tag {
                "Src" => rule.src = el,
                "Dst" => rule.dst = el,
                "Srv" => rule.srv = el,
                "Itf" => rule.itf = el,
                "When" => rule.when = el,
                other => return Err(schema(&path, format!("unknown element <{other}>"))),
            }
        }
        Ok(rule)
    }

    fn nat(&mut self, n: Node, parent: &str) -> Result<Nat> {
        let path = format!("{parent}/NAT");
        let a = self.attrs(n, &path, &["id"], &["name", "comment"])?;
        let id: ObjectId = a.req("id")?.into();
        self.claim_other_id(&id, &path)?;
        let mut rules = Vec::new();
        for c in elements(n) {
            if c.tag_name().name() != "NATRule" {
                return Err(schema(&path, format!("unexpected element <{}>", c.tag_name().name())));
            }
            rules.push(self.nat_rule(c, &path)?);
        }
        Ok(Nat::new(id, rules))
    }

    fn nat_rule(&mut self, n: Node, parent: &str) -> Result<NatRule> {
        let path = format!("{parent}/NATRule[{}]", n.attribute("position").unwrap_or("?"));
        let a = self.attrs(n, &path, &["id", "position"], &["disabled", "comment"])?;
        let id: ObjectId = a.req("id")?.into();
        self.claim_other_id(&id, &path)?;
        let mut rule = NatRule::any(id, a.req_parse("position")?);
        rule.disabled = a.bool_or("disabled", false)?;
        rule.comment = a.comment();
        let mut seen = HashSet::new();
        for c in elements(n) {
            let tag = c.tag_name().name();
            if !seen.insert(tag) {
                return Err(schema(&path, format!("duplicate <{tag}>")));
            }
            match tag {
                "OSrc" => rule.osrc = self.element(c, &path, false)?,
                "ODst" => rule.odst = self.element(c, &path, false)?,
                "OSrv" => rule.osrv = self.element(c, &path, false)?,
                "When" => rule.when = self.element(c, &path, false)?,
                "TSrc" | "TDst" | "TSrv" => {
                    let el = self.element(c, &path, true)?;
                    if el.negated {
                        return Err(schema(&path, format!("<{tag}> cannot be negated")));
                    }
                    if el.refs.len() > 1 {
                        return Err(schema(&path, format!("<{tag}> takes at most one reference")));
                    }
                    // Any in a translated field means "keep the original".
                    let target = el.refs.into_iter().next().filter(|r| !r.is_any());
                    match tag {
                        "TSrc" => rule.tsrc = target,
                        "TDst" => rule.tdst = target,
                        _ => rule.tsrv = target,
                    }
                }
                other => return Err(schema(&path, format!("unknown element <{other}>"))),
            }
        }
        Ok(rule)
    }
}

fn port_range(a: &Attrs, prefix: &str) -> Result<PortRange> {
    let get = |suffix: &str, default: u16| -> Result<u16> {
        let name = format!("{prefix}_range_{suffix}");
        match a.opt(&name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| schema(&a.path, format!("attribute {name:?} must be a port number, got {v:?}"))),
        }
    };
    let start = get("start", 0)?;
    let end = get("end", 65535)?;
    if start > end {
        return Err(schema(&a.path, format!("{prefix} port range {start}-{end} is inverted")));
    }
    Ok(PortRange { start, end })
}

fn icmp_field(a: &Attrs, name: &str) -> Result<Option<u8>> {
    match a.opt(name) {
        None | Some("") | Some("-1") => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| schema(&a.path, format!("attribute {name:?} must be 0-255 or -1, got {v:?}"))),
    }
}
