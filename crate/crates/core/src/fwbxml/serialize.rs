use crate::model::time::{format_minute, DATETIME_FMT};
use crate::model::*;
use std::collections::BTreeMap;
use std::fmt::Write;

/// Element tree used for output. Attributes are kept sorted so the
/// rendering is canonical.
struct XNode {
    tag: &'static str,
    attrs: BTreeMap<&'static str, String>,
    children: Vec<XNode>,
}

impl XNode {
    fn new(tag: &'static str) -> Self {
        XNode {
            tag,
            attrs: BTreeMap::new(),
            children: Vec::new(),
        }
    }

    fn attr(mut self, k: &'static str, v: impl ToString) -> Self {
        self.attrs.insert(k, v.to_string());
        self
    }

    fn opt_attr(self, k: &'static str, v: Option<impl ToString>) -> Self {
        match v {
            Some(v) => self.attr(k, v),
            None => self,
        }
    }

    fn render(&self, depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        let _ = write!(out, "{pad}<{}", self.tag);
        for (k, v) in &self.attrs {
            let _ = write!(out, " {k}=\"{}\"", escape(v));
        }
        if self.children.is_empty() {
            out.push_str("/>\n");
        } else {
            out.push_str(">\n");
            for c in &self.children {
                c.render(depth + 1, out);
            }
            let _ = writeln!(out, "{pad}</{}>", self.tag);
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\n' => out.push_str("&#10;"),
            '\t' => out.push_str("&#9;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

fn bool_str(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Renders the database as a canonical `.fwb` document.
pub fn serialize(db: &ObjectDatabase) -> String {
    let mut root = XNode::new("FWObjectDatabase");
    for lib in db.libraries() {
        let mut l = XNode::new("Library")
            .attr("id", &lib.id)
            .attr("name", &lib.name)
            .opt_attr("comment", lib.comment.as_ref());
        for id in &lib.objects {
            if let Some(o) = db.get(id) {
                l.children.push(object_node(db, o));
            }
        }
        root.children.push(l);
    }
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    root.render(0, &mut out);
    out
}

fn ref_tag(db: &ObjectDatabase, id: &ObjectId) -> &'static str {
    match db.category_of(id) {
        Ok(Some(Category::Service)) => "ServiceRef",
        Ok(Some(Category::Interval)) => "IntervalRef",
        _ => "ObjectRef",
    }
}

fn ref_node(db: &ObjectDatabase, id: &ObjectId) -> XNode {
    XNode::new(ref_tag(db, id)).attr("ref", id)
}

fn element_node(db: &ObjectDatabase, tag: &'static str, e: &MatchElement) -> XNode {
    let mut n = XNode::new(tag).attr("neg", bool_str(e.negated));
    n.children = e.refs.iter().map(|r| ref_node(db, r)).collect();
    n
}

fn ports(n: XNode, src: PortRange, dst: PortRange) -> XNode {
    n.attr("src_range_start", src.start)
        .attr("src_range_end", src.end)
        .attr("dst_range_start", dst.start)
        .attr("dst_range_end", dst.end)
}

fn object_node(db: &ObjectDatabase, o: &Object) -> XNode {
    let n = XNode::new(o.kind.type_name())
        .attr("id", &o.id)
        .attr("name", &o.name)
        .opt_attr("comment", o.comment.as_ref());
    let embedded = |ids: &[ObjectId]| -> Vec<XNode> {
        ids.iter()
            .filter_map(|id| db.get(id))
            .map(|c| object_node(db, c))
            .collect()
    };
    match &o.kind {
        ObjectKind::AnyAddress | ObjectKind::AnyService | ObjectKind::AnyInterval => n,
        ObjectKind::Network { address, netmask } | ObjectKind::Ipv4 { address, netmask } => {
            n.attr("address", address).attr("netmask", netmask)
        }
        ObjectKind::AddressRange { start, end } => n.attr("start", start).attr("end", end),
        ObjectKind::AddressTable { path, load } => n.attr("path", path).attr(
            "load",
            match load {
                LoadTime::Compile => "compile",
                LoadTime::Deploy => "deploy",
            },
        ),
        ObjectKind::PhysAddress(m) => n.attr("address", m),
        ObjectKind::IpService(s) => n
            .attr("protocol", s.protocol)
            .attr("lsrr", bool_str(s.lsrr))
            .attr("rr", bool_str(s.rr)),
        ObjectKind::TcpService(s) => {
            let n = ports(n, s.src, s.dst);
            match s.flags {
                Some(f) => n.attr("flags_mask", f.mask.to_list()).attr("flags_set", f.set.to_list()),
                None => n,
            }
        }
        ObjectKind::UdpService(s) => ports(n, s.src, s.dst),
        ObjectKind::IcmpService(s) => n
            .attr("type", s.icmp_type.map_or("-1".to_string(), |t| t.to_string()))
            .attr("code", s.code.map_or("-1".to_string(), |c| c.to_string())),
        ObjectKind::Interval(iv) => n
            .opt_attr("start_date", iv.start.map(|d| d.format(DATETIME_FMT)))
            .opt_attr("end_date", iv.end.map(|d| d.format(DATETIME_FMT)))
            .opt_attr("days_of_week", (!iv.days.is_empty()).then_some(iv.days))
            .opt_attr("from_time", iv.from.map(format_minute))
            .opt_attr("to_time", iv.to.map(format_minute)),
        ObjectKind::Group { members } => {
            let mut n = n;
            n.children = members.iter().map(|m| ref_node(db, m)).collect();
            n
        }
        ObjectKind::Host { interfaces } => {
            let mut n = n;
            n.children = embedded(interfaces);
            n
        }
        ObjectKind::Interface(itf) => {
            let mut n = n
                .attr("dyn", bool_str(itf.dynamic))
                .attr("unnum", bool_str(itf.unnumbered))
                .opt_attr("unprotected", itf.unprotected.map(bool_str));
            n.children = embedded(&itf.addresses);
            n.children.extend(embedded(itf.phys.as_slice()));
            n
        }
        ObjectKind::Firewall(fw) => {
            let mut n = n.attr("platform", &fw.platform).attr("host_OS", &fw.host_os);
            n.children = embedded(&fw.interfaces);
            if let Some(p) = &fw.policy {
                let mut pn = XNode::new("Policy").attr("id", &p.id);
                for r in &p.rules {
                    let mut rn = XNode::new("PolicyRule")
                        .attr("id", &r.id)
                        .attr("position", r.position)
                        .attr("action", r.action.as_str())
                        .attr("direction", r.direction.as_str())
                        .attr("disabled", bool_str(r.disabled))
                        .opt_attr("comment", r.comment.as_ref());
                    rn.children = vec![
                        element_node(db, "Src", &r.src),
                        element_node(db, "Dst", &r.dst),
                        element_node(db, "Srv", &r.srv),
                        element_node(db, "Itf", &r.itf),
                        element_node(db, "When", &r.when),
                    ];
                    pn.children.push(rn);
                }
                n.children.push(pn);
            }
            if let Some(nat) = &fw.nat {
                let mut nn = XNode::new("NAT").attr("id", &nat.id);
                for r in &nat.rules {
                    let mut rn = XNode::new("NATRule")
                        .attr("id", &r.id)
                        .attr("position", r.position)
                        .attr("disabled", bool_str(r.disabled))
                        .opt_attr("comment", r.comment.as_ref());
                    let target = |tag, t: &Option<ObjectId>, any: &str| {
                        let id = t.clone().unwrap_or_else(|| ObjectId::from(any));
                        element_node(db, tag, &MatchElement::from(id))
                    };
                    rn.children = vec![
                        element_node(db, "OSrc", &r.osrc),
                        element_node(db, "ODst", &r.odst),
                        element_node(db, "OSrv", &r.osrv),
                        target("TSrc", &r.tsrc, ANY_ADDRESS),
                        target("TDst", &r.tdst, ANY_ADDRESS),
                        target("TSrv", &r.tsrv, ANY_SERVICE),
                        element_node(db, "When", &r.when),
                    ];
                    nn.children.push(rn);
                }
                n.children.push(nn);
            }
            n
        }
    }
}
