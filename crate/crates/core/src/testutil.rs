//! Helpers for building small databases in unit tests.
#![allow(dead_code)]

use crate::model::*;
use std::net::Ipv4Addr;

pub const LIB: &str = "lib-test";
pub const FW: &str = "fw";

pub fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

pub fn net(id: &str, cidr: &str) -> Object {
    let c: Cidr = cidr.parse().unwrap();
    Object::new(
        id,
        id,
        ObjectKind::Network {
            address: c.base().into(),
            netmask: sets::prefix_mask(c.prefix()).into(),
        },
    )
}

pub fn addr(id: &str, a: &str) -> Object {
    Object::new(
        id,
        id,
        ObjectKind::Ipv4 {
            address: ip(a),
            netmask: Ipv4Addr::new(255, 255, 255, 255),
        },
    )
}

pub fn range(id: &str, a: &str, b: &str) -> Object {
    Object::new(id, id, ObjectKind::AddressRange { start: ip(a), end: ip(b) })
}

pub fn group(id: &str, members: &[&str]) -> Object {
    Object::new(
        id,
        id,
        ObjectKind::Group {
            members: members.iter().map(|m| ObjectId::from(*m)).collect(),
        },
    )
}

pub fn tcp(id: &str, dst: (u16, u16)) -> Object {
    Object::new(
        id,
        id,
        ObjectKind::TcpService(TcpService {
            src: PortRange::ANY,
            dst: PortRange::new(dst.0, dst.1),
            flags: None,
        }),
    )
}

pub fn udp(id: &str, src: (u16, u16), dst: (u16, u16)) -> Object {
    Object::new(
        id,
        id,
        ObjectKind::UdpService(UdpService {
            src: PortRange::new(src.0, src.1),
            dst: PortRange::new(dst.0, dst.1),
        }),
    )
}

pub fn mac(id: &str, m: &str) -> Object {
    Object::new(id, id, ObjectKind::PhysAddress(m.parse().unwrap()))
}

pub fn rule(pos: u32, action: Action) -> PolicyRule {
    PolicyRule::any(format!("r{pos}"), pos, action)
}

pub fn el(refs: &[&str]) -> MatchElement {
    MatchElement::new(refs.iter().copied())
}

/// A firewall `fw` with static interfaces `eth0` (192.0.2.1) and `eth1`
/// (198.51.100.1), the given extra objects, policy and NAT rules.
pub struct FwBuilder {
    pub platform: Platform,
    pub objects: Vec<Object>,
    pub rules: Vec<PolicyRule>,
    pub nat: Vec<NatRule>,
    pub dynamic_eth1: bool,
}

impl FwBuilder {
    pub fn new() -> Self {
        FwBuilder {
            platform: Platform::Iptables,
            objects: Vec::new(),
            rules: Vec::new(),
            nat: Vec::new(),
            dynamic_eth1: false,
        }
    }

    pub fn obj(mut self, o: Object) -> Self {
        self.objects.push(o);
        self
    }

    pub fn rule(mut self, r: PolicyRule) -> Self {
        self.rules.push(r);
        self
    }

    pub fn nat(mut self, r: NatRule) -> Self {
        self.nat.push(r);
        self
    }

    pub fn build(self) -> ObjectDatabase {
        let mut b = DbBuilder::new();
        let lib = b.add_library(LIB, "Test", None);
        for o in self.objects {
            b.add(&lib, o).unwrap();
        }
        let mut itf_ids = Vec::new();
        for (name, a, dynamic) in [("eth0", "192.0.2.1", false), ("eth1", "198.51.100.1", self.dynamic_eth1)] {
            let id = ObjectId::from(format!("fw-{name}").as_str());
            let mut addresses = Vec::new();
            if !dynamic {
                let mut ao = addr(&format!("fw-{name}-ip"), a);
                ao.parent = Some(id.clone());
                addresses.push(b.add_embedded(ao).unwrap());
            }
            let mut io = Object::new(
                id.clone(),
                name,
                ObjectKind::Interface(Interface {
                    dynamic,
                    unnumbered: false,
                    unprotected: None,
                    addresses,
                    phys: None,
                }),
            );
            io.parent = Some(FW.into());
            itf_ids.push(b.add_embedded(io).unwrap());
        }
        let fw = Firewall {
            platform: self.platform.as_str().to_string(),
            host_os: String::new(),
            interfaces: itf_ids,
            policy: Some(Policy::new("fw-policy", self.rules)),
            nat: (!self.nat.is_empty()).then(|| Nat::new("fw-nat", self.nat)),
        };
        b.add(&lib, Object::new(FW, FW, ObjectKind::Firewall(Box::new(fw))))
            .unwrap();
        b.build()
    }
}

pub fn the_fw(db: &ObjectDatabase) -> &Firewall {
    db.firewall(FW).unwrap().1
}
