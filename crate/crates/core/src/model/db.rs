use super::service::{ServiceSet, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use super::sets::{AddressSet, Cidr, FiniteSet};
use super::time::{time_universe, TimeSet};
use super::*;
use std::collections::{BTreeSet, HashMap};

pub const STANDARD_LIBRARY_ID: &str = "syslib000";

/// Id-indexed store of libraries and every object they contain, including
/// embedded ones. Immutable once built.
#[derive(Debug, Clone)]
pub struct ObjectDatabase {
    libraries: Vec<Library>,
    objects: Vec<Object>,
    index: HashMap<ObjectId, usize>,
    /// Contents of compile-time address tables, filled by the loader.
    tables: HashMap<ObjectId, AddressSet>,
}

/// Union of everything a Src/Dst field refers to, split by layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AddressTerms {
    pub ip: AddressSet,
    pub macs: BTreeSet<MacAddr>,
    /// Members whose addresses are not known at compile time, with reason.
    pub opaque: Vec<(ObjectId, String)>,
}

impl AddressTerms {
    pub fn has_ip(&self) -> bool {
        !self.ip.is_empty()
    }

    pub fn has_mac(&self) -> bool {
        !self.macs.is_empty()
    }

    /// True when the element mixes network- and link-layer members.
    pub fn is_mixed_layer(&self) -> bool {
        self.has_mac() && (self.has_ip() || !self.opaque.is_empty()) && !self.ip.is_full()
    }

    fn merge(&mut self, o: AddressTerms) {
        self.ip = self.ip.union(&o.ip);
        self.macs.extend(o.macs);
        self.opaque.extend(o.opaque);
    }
}

fn standard_library() -> (Library, Vec<Object>) {
    let rfc1918 = [
        ("stdid-net-10", "net-10.0.0.0", "10.0.0.0", "255.0.0.0"),
        ("stdid-net-172", "net-172.16.0.0", "172.16.0.0", "255.240.0.0"),
        ("stdid-net-192", "net-192.168.0.0", "192.168.0.0", "255.255.0.0"),
    ];
    let mut objects = vec![
        Object::new(ANY_ADDRESS, "Any", ObjectKind::AnyAddress),
        Object::new(ANY_SERVICE, "Any", ObjectKind::AnyService),
        Object::new(ANY_INTERVAL, "Any", ObjectKind::AnyInterval),
    ];
    for (id, name, addr, mask) in rfc1918 {
        objects.push(Object::new(
            id,
            name,
            ObjectKind::Network {
                address: addr.parse().expect("static address"),
                netmask: mask.parse().expect("static mask"),
            },
        ));
    }
    objects.push(Object::new(
        "stdid-rfc1918",
        "rfc1918-nets",
        ObjectKind::Group {
            members: rfc1918.iter().map(|(id, ..)| ObjectId::from(*id)).collect(),
        },
    ));
    let lib = Library {
        id: STANDARD_LIBRARY_ID.into(),
        name: "Standard".into(),
        comment: None,
        objects: objects.iter().map(|o| o.id.clone()).collect(),
    };
    (lib, objects)
}

/// Structural equality: same libraries, same objects by id, same loaded
/// tables. Insertion order of embedded objects does not matter.
impl PartialEq for ObjectDatabase {
    fn eq(&self, o: &Self) -> bool {
        self.libraries == o.libraries
            && self.tables == o.tables
            && self.objects.len() == o.objects.len()
            && self.objects.iter().all(|x| o.get(&x.id) == Some(x))
    }
}

impl Eq for ObjectDatabase {}

impl Default for ObjectDatabase {
    fn default() -> Self {
        DbBuilder::new().build()
    }
}

impl ObjectDatabase {
    pub fn libraries(&self) -> &[Library] {
        &self.libraries
    }

    pub fn objects(&self) -> impl Iterator<Item = &Object> {
        self.objects.iter()
    }

    pub fn get(&self, id: &ObjectId) -> Option<&Object> {
        self.index.get(id).map(|&i| &self.objects[i])
    }

    pub fn resolve(&self, id: &ObjectId) -> Result<&Object, ModelError> {
        self.get(id).ok_or_else(|| ModelError::UnknownId(id.clone()))
    }

    pub fn firewalls(&self) -> impl Iterator<Item = (&Object, &Firewall)> {
        self.objects
            .iter()
            .filter_map(|o| o.as_firewall().map(|fw| (o, fw)))
    }

    /// Looks a firewall up by name, falling back to id.
    pub fn firewall(&self, name: &str) -> Option<(&Object, &Firewall)> {
        self.firewalls()
            .find(|(o, _)| o.name == name)
            .or_else(|| self.firewalls().find(|(o, _)| o.id.as_str() == name))
    }

    /// Interface objects of a host or firewall, in declaration order.
    pub fn interfaces<'a>(&'a self, ids: &'a [ObjectId]) -> impl Iterator<Item = (&'a Object, &'a Interface)> {
        ids.iter()
            .filter_map(|id| self.get(id))
            .filter_map(|o| o.as_interface().map(|i| (o, i)))
    }

    pub fn interface_names(&self, fw: &Firewall) -> Vec<String> {
        self.interfaces(&fw.interfaces)
            .map(|(o, _)| o.name.clone())
            .collect()
    }

    pub fn loaded_table(&self, id: &ObjectId) -> Option<&AddressSet> {
        self.tables.get(id)
    }

    /// Runs `load` for every compile-time address table and stores the result.
    pub fn with_loaded_tables<E, F>(&self, mut load: F) -> Result<ObjectDatabase, E>
    where
        F: FnMut(&Object, &str) -> Result<AddressSet, E>,
    {
        let mut db = self.clone();
        for o in &self.objects {
            if let ObjectKind::AddressTable {
                path,
                load: LoadTime::Compile,
            } = &o.kind
            {
                let set = load(o, path)?;
                db.tables.insert(o.id.clone(), set);
            }
        }
        Ok(db)
    }

    /// Copy of this database with the policy of firewall `fw` replaced.
    pub fn with_policy(&self, fw: &ObjectId, policy: Policy) -> Result<ObjectDatabase, ModelError> {
        let mut db = self.clone();
        let idx = *db.index.get(fw).ok_or_else(|| ModelError::UnknownId(fw.clone()))?;
        match &mut db.objects[idx].kind {
            ObjectKind::Firewall(f) => {
                f.policy = Some(policy);
                Ok(db)
            }
            other => Err(ModelError::WrongType {
                id: fw.clone(),
                expected: "Firewall",
                found: other.type_name(),
            }),
        }
    }

    /// Category of an object; groups take the category of their members.
    /// Empty groups have no category.
    pub fn category_of(&self, id: &ObjectId) -> Result<Option<Category>, ModelError> {
        self.category_rec(id, &mut Vec::new())
    }

    fn category_rec(&self, id: &ObjectId, stack: &mut Vec<ObjectId>) -> Result<Option<Category>, ModelError> {
        let o = self.resolve(id)?;
        match &o.kind {
            ObjectKind::Group { members } => {
                if stack.contains(id) {
                    return Err(ModelError::CyclicGroup(id.clone()));
                }
                stack.push(id.clone());
                let mut cat = None;
                for m in members {
                    if let Some(c) = self.category_rec(m, stack)? {
                        cat.get_or_insert(c);
                    }
                }
                stack.pop();
                Ok(cat)
            }
            k => Ok(k.category()),
        }
    }

    /// Leaf members of `id`, expanding groups recursively.
    pub fn leaves(&self, id: &ObjectId) -> Result<Vec<&Object>, ModelError> {
        let mut out = Vec::new();
        self.leaves_rec(id, &mut Vec::new(), &mut out)?;
        Ok(out)
    }

    fn leaves_rec<'a>(
        &'a self,
        id: &ObjectId,
        stack: &mut Vec<ObjectId>,
        out: &mut Vec<&'a Object>,
    ) -> Result<(), ModelError> {
        let o = self.resolve(id)?;
        if let ObjectKind::Group { members } = &o.kind {
            if stack.contains(id) {
                return Err(ModelError::CyclicGroup(id.clone()));
            }
            stack.push(id.clone());
            for m in members {
                self.leaves_rec(m, stack, out)?;
            }
            stack.pop();
        } else {
            out.push(o);
        }
        Ok(())
    }

    /// Addresses of one non-group address object.
    pub fn leaf_address_terms(&self, o: &Object) -> Result<AddressTerms, ModelError> {
        let mut t = AddressTerms::default();
        let opaque = |reason: &str| (o.id.clone(), reason.to_string());
        match &o.kind {
            ObjectKind::AnyAddress => t.ip = AddressSet::full(),
            ObjectKind::Network { address, netmask } => {
                let prefix = sets::mask_prefix(u32::from(*netmask)).ok_or_else(|| ModelError::WrongType {
                    id: o.id.clone(),
                    expected: "Network with contiguous netmask",
                    found: "Network",
                })?;
                t.ip = AddressSet::cidr(Cidr::new(u32::from(*address), prefix));
            }
            ObjectKind::Ipv4 { address, .. } => t.ip = AddressSet::single(u32::from(*address)),
            ObjectKind::AddressRange { start, end } => {
                t.ip = AddressSet::range(u32::from(*start), u32::from(*end))
            }
            ObjectKind::AddressTable { load, .. } => match load {
                LoadTime::Compile => {
                    t.ip = self
                        .tables
                        .get(&o.id)
                        .cloned()
                        .ok_or_else(|| ModelError::TableNotLoaded(o.id.clone()))?
                }
                LoadTime::Deploy => t.opaque.push(opaque("address table loaded at deploy time")),
            },
            ObjectKind::PhysAddress(m) => {
                t.macs.insert(*m);
            }
            ObjectKind::Host { interfaces } => self.host_terms(o, interfaces, &mut t)?,
            ObjectKind::Firewall(fw) => self.host_terms(o, &fw.interfaces, &mut t)?,
            ObjectKind::Interface(itf) => {
                if itf.dynamic {
                    t.opaque.push(opaque("dynamic interface address"));
                } else {
                    t.ip = self.interface_ips(itf)?;
                    if t.ip.is_empty() {
                        t.opaque.push(opaque("interface has no static address"));
                    }
                }
            }
            k => {
                return Err(ModelError::WrongType {
                    id: o.id.clone(),
                    expected: "address object",
                    found: k.type_name(),
                })
            }
        }
        Ok(t)
    }

    fn interface_ips(&self, itf: &Interface) -> Result<AddressSet, ModelError> {
        let mut set = AddressSet::empty();
        for a in &itf.addresses {
            if let ObjectKind::Ipv4 { address, .. } = &self.resolve(a)?.kind {
                set = set.union(&AddressSet::single(u32::from(*address)));
            }
        }
        Ok(set)
    }

    fn host_terms(&self, o: &Object, interfaces: &[ObjectId], t: &mut AddressTerms) -> Result<(), ModelError> {
        for (_, itf) in self.interfaces(interfaces) {
            if !itf.dynamic {
                t.ip = t.ip.union(&self.interface_ips(itf)?);
            }
        }
        if t.ip.is_empty() {
            t.opaque
                .push((o.id.clone(), "host has no static address".to_string()));
        }
        Ok(())
    }

    /// Layered union of all objects referenced by `refs`.
    pub fn address_terms(&self, refs: &[ObjectId]) -> Result<AddressTerms, ModelError> {
        let mut t = AddressTerms::default();
        for r in refs {
            for leaf in self.leaves(r)? {
                t.merge(self.leaf_address_terms(leaf)?);
            }
        }
        Ok(t)
    }

    /// Canonical IPv4 set of an address-like object.
    pub fn address_set_of(&self, id: &ObjectId) -> Result<AddressSet, ModelError> {
        let t = self.address_terms(std::slice::from_ref(id))?;
        if let Some((oid, reason)) = t.opaque.into_iter().next() {
            return Err(ModelError::OpaqueSet { id: oid, reason });
        }
        if !t.macs.is_empty() {
            return Err(ModelError::WrongType {
                id: id.clone(),
                expected: "IPv4 address object",
                found: "physAddress",
            });
        }
        Ok(t.ip)
    }

    pub fn leaf_service_set(&self, o: &Object) -> Result<ServiceSet, ModelError> {
        Ok(match &o.kind {
            ObjectKind::AnyService => ServiceSet::universal(),
            ObjectKind::TcpService(s) => ServiceSet::tcp((s.src.start, s.src.end), (s.dst.start, s.dst.end), s.flags),
            ObjectKind::UdpService(s) => ServiceSet::udp((s.src.start, s.src.end), (s.dst.start, s.dst.end)),
            ObjectKind::IcmpService(s) => ServiceSet::icmp(s.icmp_type, s.code),
            ObjectKind::IpService(s) => ServiceSet::ip_proto(s.protocol),
            k => {
                return Err(ModelError::WrongType {
                    id: o.id.clone(),
                    expected: "service object",
                    found: k.type_name(),
                })
            }
        })
    }

    pub fn service_set_of(&self, id: &ObjectId) -> Result<ServiceSet, ModelError> {
        self.service_set_of_refs(std::slice::from_ref(id))
    }

    pub fn service_set_of_refs(&self, refs: &[ObjectId]) -> Result<ServiceSet, ModelError> {
        let mut s = ServiceSet::empty();
        for r in refs {
            for leaf in self.leaves(r)? {
                s = s.union(&self.leaf_service_set(leaf)?);
            }
        }
        Ok(s)
    }

    pub fn time_set_of_refs(&self, refs: &[ObjectId]) -> Result<TimeSet, ModelError> {
        let mut s = TimeSet::empty();
        for r in refs {
            for leaf in self.leaves(r)? {
                match &leaf.kind {
                    ObjectKind::AnyInterval => s = time_universe(),
                    ObjectKind::Interval(iv) => s.insert(iv.cell()),
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
        Ok(s)
    }

    /// Interface names referenced by an Itf field. `sysid0` means every interface.
    pub fn interface_set_of_refs(&self, refs: &[ObjectId]) -> Result<FiniteSet<String>, ModelError> {
        let mut s = FiniteSet::none();
        for r in refs {
            for leaf in self.leaves(r)? {
                match &leaf.kind {
                    ObjectKind::AnyAddress => s = FiniteSet::all(),
                    ObjectKind::Interface(_) => s = s.union(&FiniteSet::only([leaf.name.clone()])),
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
        Ok(s)
    }

    /// The single address a NAT translation field designates.
    pub fn single_address_of(&self, id: &ObjectId) -> Result<u32, ModelError> {
        let set = self.address_set_of(id)?;
        match set.intervals() {
            [(a, b)] if a == b => Ok(*a),
            _ => Err(ModelError::WrongType {
                id: id.clone(),
                expected: "single address",
                found: "address set",
            }),
        }
    }

    /// Port rewrite designated by a NAT translated-service field.
    pub fn port_rewrite_of(&self, id: &ObjectId) -> Result<PortRewrite, ModelError> {
        let o = self.resolve(id)?;
        let wrong = |found: &'static str| ModelError::WrongType {
            id: id.clone(),
            expected: "TCP or UDP service with single-port or full ranges",
            found,
        };
        let (protocol, src, dst) = match &o.kind {
            ObjectKind::TcpService(s) if s.flags.is_none() => (PROTO_TCP, s.src, s.dst),
            ObjectKind::UdpService(s) => (PROTO_UDP, s.src, s.dst),
            k => return Err(wrong(k.type_name())),
        };
        let pick = |r: PortRange| -> Result<Option<u16>, ModelError> {
            if r.is_any() {
                Ok(None)
            } else if r.is_single() {
                Ok(Some(r.start))
            } else {
                Err(wrong("port range"))
            }
        };
        Ok(PortRewrite {
            protocol,
            src_port: pick(src)?,
            dst_port: pick(dst)?,
        })
    }

    /// Protocols an element's services can carry; used to check NAT
    /// service translations.
    pub fn service_protocols(&self, refs: &[ObjectId]) -> Result<BTreeSet<u8>, ModelError> {
        let mut out = BTreeSet::new();
        for r in refs {
            for leaf in self.leaves(r)? {
                match &leaf.kind {
                    ObjectKind::TcpService(_) => {
                        out.insert(PROTO_TCP);
                    }
                    ObjectKind::UdpService(_) => {
                        out.insert(PROTO_UDP);
                    }
                    ObjectKind::IcmpService(_) => {
                        out.insert(PROTO_ICMP);
                    }
                    ObjectKind::IpService(s) => {
                        out.insert(s.protocol);
                    }
                    _ => {
                        // Any: every protocol
                        out.extend([0u8, PROTO_ICMP, PROTO_TCP, PROTO_UDP]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Rewrite of transport ports by a NAT rule. Applies only to packets of
/// `protocol`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PortRewrite {
    pub protocol: u8,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
}

/// Incremental construction of an [`ObjectDatabase`].
#[derive(Debug)]
pub struct DbBuilder {
    db: ObjectDatabase,
}

impl Default for DbBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl DbBuilder {
    /// Builder seeded with the standard library.
    pub fn new() -> Self {
        let mut b = Self::bare();
        b.ensure_standard_library();
        b
    }

    /// Builder with no libraries at all.
    pub fn bare() -> Self {
        DbBuilder {
            db: ObjectDatabase {
                libraries: Vec::new(),
                objects: Vec::new(),
                index: HashMap::new(),
                tables: HashMap::new(),
            },
        }
    }

    pub fn contains(&self, id: &ObjectId) -> bool {
        self.db.index.contains_key(id)
    }

    pub fn add_library(&mut self, id: impl Into<ObjectId>, name: impl Into<String>, comment: Option<String>) -> ObjectId {
        let id = id.into();
        self.db.libraries.push(Library {
            id: id.clone(),
            name: name.into(),
            comment,
            objects: Vec::new(),
        });
        id
    }

    /// Adds a top-level object to library `lib`.
    pub fn add(&mut self, lib: &ObjectId, obj: Object) -> Result<ObjectId, ModelError> {
        let id = self.insert(obj)?;
        let l = self
            .db
            .libraries
            .iter_mut()
            .find(|l| &l.id == lib)
            .ok_or_else(|| ModelError::UnknownId(lib.clone()))?;
        l.objects.push(id.clone());
        Ok(id)
    }

    /// Adds an embedded object; its `parent` must already be set.
    pub fn add_embedded(&mut self, obj: Object) -> Result<ObjectId, ModelError> {
        self.insert(obj)
    }

    fn insert(&mut self, obj: Object) -> Result<ObjectId, ModelError> {
        if self.db.index.contains_key(&obj.id) {
            return Err(ModelError::DuplicateId(obj.id));
        }
        let id = obj.id.clone();
        self.db.index.insert(id.clone(), self.db.objects.len());
        self.db.objects.push(obj);
        Ok(id)
    }

    /// Makes sure the reserved wildcard objects exist, adding the standard
    /// library (or the missing reserved objects) at the front if needed.
    pub fn ensure_standard_library(&mut self) {
        let (lib, objects) = standard_library();
        let has_lib = self.db.libraries.iter().any(|l| l.id == lib.id);
        if !has_lib {
            let mut l = lib.clone();
            l.objects.clear();
            self.db.libraries.insert(0, l);
        }
        let reserved: [&str; 3] = [ANY_ADDRESS, ANY_SERVICE, ANY_INTERVAL];
        for o in objects {
            let wanted = !has_lib || reserved.contains(&o.id.as_str());
            if wanted && !self.contains(&o.id) {
                let _ = self.add(&lib.id, o);
            }
        }
    }

    pub fn build(self) -> ObjectDatabase {
        self.db
    }
}
