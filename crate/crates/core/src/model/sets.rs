//! Canonical set carriers used by matching and by the region analysis.
//!
//! Every dimension of a rule (addresses, ports, protocols, interface names,
//! time) is reduced to one of the types here so that union, complement and
//! subset can be computed exactly instead of by sampling.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;

/// Sorted, disjoint, non-adjacent inclusive intervals over `u32`.
///
/// The representation is canonical: two sets are equal iff their interval
/// lists are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct IntervalSet {
    ivs: Vec<(u32, u32)>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        IntervalSet { ivs: Vec::new() }
    }

    /// The set `[0, max]`.
    pub fn full(max: u32) -> Self {
        IntervalSet { ivs: vec![(0, max)] }
    }

    pub fn single(v: u32) -> Self {
        IntervalSet { ivs: vec![(v, v)] }
    }

    /// The interval `[lo, hi]`; empty when `lo > hi`.
    pub fn range(lo: u32, hi: u32) -> Self {
        if lo > hi {
            Self::empty()
        } else {
            IntervalSet { ivs: vec![(lo, hi)] }
        }
    }

    /// Builds the canonical form of an arbitrary list of inclusive intervals.
    /// Intervals with `lo > hi` are ignored.
    pub fn from_intervals<I: IntoIterator<Item = (u32, u32)>>(it: I) -> Self {
        let mut v: Vec<(u32, u32)> = it.into_iter().filter(|(a, b)| a <= b).collect();
        v.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::with_capacity(v.len());
        for (lo, hi) in v {
            match out.last_mut() {
                Some(last) if u64::from(lo) <= u64::from(last.1) + 1 => {
                    if hi > last.1 {
                        last.1 = hi;
                    }
                }
                _ => out.push((lo, hi)),
            }
        }
        IntervalSet { ivs: out }
    }

    pub fn intervals(&self) -> &[(u32, u32)] {
        &self.ivs
    }

    pub fn is_empty(&self) -> bool {
        self.ivs.is_empty()
    }

    /// Number of members.
    pub fn count(&self) -> u64 {
        self.ivs
            .iter()
            .map(|&(a, b)| u64::from(b) - u64::from(a) + 1)
            .sum()
    }

    pub fn contains(&self, x: u32) -> bool {
        // first interval whose hi >= x
        let idx = self.ivs.partition_point(|&(_, hi)| hi < x);
        self.ivs.get(idx).is_some_and(|&(lo, _)| lo <= x)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_intervals(self.ivs.iter().chain(other.ivs.iter()).copied())
    }

    pub fn intersect(&self, other: &Self) -> Self {
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < self.ivs.len() && j < other.ivs.len() {
            let (a0, a1) = self.ivs[i];
            let (b0, b1) = other.ivs[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo <= hi {
                out.push((lo, hi));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        IntervalSet { ivs: out }
    }

    /// Complement relative to `[0, max]`.
    pub fn complement(&self, max: u32) -> Self {
        let mut out = Vec::new();
        let mut next: u64 = 0;
        for &(lo, hi) in &self.ivs {
            if lo > max {
                break;
            }
            if u64::from(lo) > next {
                out.push((next as u32, lo - 1));
            }
            next = u64::from(hi) + 1;
        }
        if next <= u64::from(max) {
            out.push((next as u32, max));
        }
        IntervalSet { ivs: out }
    }

    pub fn difference(&self, other: &Self) -> Self {
        let max = self.ivs.last().map_or(0, |l| l.1);
        self.intersect(&other.complement(max))
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.difference(other).is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.ivs.iter().flat_map(|&(a, b)| a..=b)
    }
}

/// An IPv4 CIDR block. The address is always the block base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cidr {
    base: u32,
    prefix: u8,
}

impl Cidr {
    /// Creates a block, clearing host bits of `addr`. `prefix` must be <= 32.
    pub fn new(addr: u32, prefix: u8) -> Self {
        assert!(prefix <= 32, "prefix length out of range");
        Cidr {
            base: addr & prefix_mask(prefix),
            prefix,
        }
    }

    pub fn host(addr: u32) -> Self {
        Cidr::new(addr, 32)
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn prefix(&self) -> u8 {
        self.prefix
    }

    pub fn last(&self) -> u32 {
        self.base | !prefix_mask(self.prefix)
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr & prefix_mask(self.prefix) == self.base
    }

    /// Returns the block exactly equal to `[lo, hi]`, if there is one.
    pub fn from_interval(lo: u32, hi: u32) -> Option<Cidr> {
        if lo > hi {
            return None;
        }
        let size = u64::from(hi) - u64::from(lo) + 1;
        if !size.is_power_of_two() {
            return None;
        }
        let prefix = 32 - size.trailing_zeros() as u8;
        let c = Cidr::new(lo, prefix);
        (c.base == lo).then_some(c)
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.prefix == 32 {
            write!(f, "{}", Ipv4Addr::from(self.base))
        } else {
            write!(f, "{}/{}", Ipv4Addr::from(self.base), self.prefix)
        }
    }
}

impl std::str::FromStr for Cidr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, prefix) = match s.split_once('/') {
            Some((a, p)) => {
                let p: u8 = p.parse().map_err(|_| format!("bad prefix length in {s:?}"))?;
                if p > 32 {
                    return Err(format!("prefix length {p} exceeds 32"));
                }
                (a, p)
            }
            None => (s, 32),
        };
        let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad IPv4 address {addr:?}"))?;
        Ok(Cidr::new(u32::from(addr), prefix))
    }
}

/// Network mask with `prefix` leading ones.
pub fn prefix_mask(prefix: u8) -> u32 {
    if prefix == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(prefix))
    }
}

/// Prefix length of a contiguous netmask, or `None` for masks like 255.0.255.0.
pub fn mask_prefix(mask: u32) -> Option<u8> {
    let ones = mask.leading_ones();
    (prefix_mask(ones as u8) == mask).then_some(ones as u8)
}

/// Set of IPv4 addresses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct AddressSet(IntervalSet);

impl AddressSet {
    pub fn empty() -> Self {
        AddressSet(IntervalSet::empty())
    }

    pub fn full() -> Self {
        AddressSet(IntervalSet::full(u32::MAX))
    }

    pub fn single(addr: u32) -> Self {
        AddressSet(IntervalSet::single(addr))
    }

    pub fn range(first: u32, last: u32) -> Self {
        AddressSet(IntervalSet::range(first, last))
    }

    pub fn cidr(c: Cidr) -> Self {
        AddressSet::range(c.base(), c.last())
    }

    pub fn from_intervals<I: IntoIterator<Item = (u32, u32)>>(it: I) -> Self {
        AddressSet(IntervalSet::from_intervals(it))
    }

    pub fn intervals(&self) -> &[(u32, u32)] {
        self.0.intervals()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.0.intervals() == [(0, u32::MAX)]
    }

    pub fn count(&self) -> u64 {
        self.0.count()
    }

    pub fn contains(&self, addr: u32) -> bool {
        self.0.contains(addr)
    }

    pub fn union(&self, o: &Self) -> Self {
        AddressSet(self.0.union(&o.0))
    }

    pub fn intersect(&self, o: &Self) -> Self {
        AddressSet(self.0.intersect(&o.0))
    }

    pub fn difference(&self, o: &Self) -> Self {
        AddressSet(self.0.difference(&o.0))
    }

    pub fn complement(&self) -> Self {
        AddressSet(self.0.complement(u32::MAX))
    }

    pub fn is_subset(&self, o: &Self) -> bool {
        self.0.is_subset(&o.0)
    }

    pub fn as_interval_set(&self) -> &IntervalSet {
        &self.0
    }
}

impl fmt::Display for AddressSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, &(a, b)) in self.intervals().iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            if a == b {
                write!(f, "{}", Ipv4Addr::from(a))?;
            } else {
                write!(f, "{}-{}", Ipv4Addr::from(a), Ipv4Addr::from(b))?;
            }
        }
        f.write_str("}")
    }
}

/// A set over an unbounded (or large) domain of discrete values, kept either
/// as an explicit member list or as the complement of one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FiniteSet<T: Ord> {
    Only(BTreeSet<T>),
    Except(BTreeSet<T>),
}

impl<T: Ord + Clone> FiniteSet<T> {
    pub fn all() -> Self {
        FiniteSet::Except(BTreeSet::new())
    }

    pub fn none() -> Self {
        FiniteSet::Only(BTreeSet::new())
    }

    pub fn only<I: IntoIterator<Item = T>>(it: I) -> Self {
        FiniteSet::Only(it.into_iter().collect())
    }

    pub fn is_all(&self) -> bool {
        matches!(self, FiniteSet::Except(s) if s.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, FiniteSet::Only(s) if s.is_empty())
    }

    pub fn contains(&self, v: &T) -> bool {
        match self {
            FiniteSet::Only(s) => s.contains(v),
            FiniteSet::Except(s) => !s.contains(v),
        }
    }

    pub fn complement(&self) -> Self {
        match self {
            FiniteSet::Only(s) => FiniteSet::Except(s.clone()),
            FiniteSet::Except(s) => FiniteSet::Only(s.clone()),
        }
    }

    pub fn union(&self, o: &Self) -> Self {
        use FiniteSet::*;
        match (self, o) {
            (Only(a), Only(b)) => Only(a.union(b).cloned().collect()),
            (Only(a), Except(b)) | (Except(b), Only(a)) => Except(b.difference(a).cloned().collect()),
            (Except(a), Except(b)) => Except(a.intersection(b).cloned().collect()),
        }
    }

    pub fn intersect(&self, o: &Self) -> Self {
        self.complement().union(&o.complement()).complement()
    }

    pub fn is_subset(&self, o: &Self) -> bool {
        use FiniteSet::*;
        match (self, o) {
            (Only(a), Only(b)) => a.is_subset(b),
            (Only(a), Except(b)) => a.is_disjoint(b),
            (Except(_), Only(_)) => false,
            (Except(a), Except(b)) => b.is_subset(a),
        }
    }
}

/// One axis-aligned cell of a product space. Implementors describe how to
/// intersect two cells and how to cut one cell out of another.
pub trait Cell: Clone + fmt::Debug {
    fn is_empty(&self) -> bool;
    fn intersect(&self, other: &Self) -> Self;
    /// `self \ other` as a list of pairwise disjoint cells.
    fn subtract(&self, other: &Self) -> Vec<Self>;
}

/// Finite union of pairwise disjoint cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellSet<C> {
    cells: Vec<C>,
}

impl<C: Cell> Default for CellSet<C> {
    fn default() -> Self {
        CellSet { cells: Vec::new() }
    }
}

impl<C: Cell> CellSet<C> {
    pub fn empty() -> Self {
        CellSet { cells: Vec::new() }
    }

    pub fn from_cell(c: C) -> Self {
        let mut s = Self::empty();
        s.insert(c);
        s
    }

    pub fn cells(&self) -> &[C] {
        &self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Adds the part of `c` not already covered.
    pub fn insert(&mut self, c: C) {
        let mut pieces = vec![c];
        for existing in &self.cells {
            pieces = pieces
                .into_iter()
                .flat_map(|p| p.subtract(existing))
                .collect();
            if pieces.is_empty() {
                return;
            }
        }
        self.cells.extend(pieces.into_iter().filter(|p| !p.is_empty()));
    }

    pub fn union(&self, o: &Self) -> Self {
        let mut out = self.clone();
        for c in &o.cells {
            out.insert(c.clone());
        }
        out
    }

    pub fn intersect(&self, o: &Self) -> Self {
        let mut out = Vec::new();
        for a in &self.cells {
            for b in &o.cells {
                let i = a.intersect(b);
                if !i.is_empty() {
                    out.push(i);
                }
            }
        }
        CellSet { cells: out }
    }

    pub fn difference(&self, o: &Self) -> Self {
        let mut out = Vec::new();
        for a in &self.cells {
            let mut pieces = vec![a.clone()];
            for b in &o.cells {
                pieces = pieces.into_iter().flat_map(|p| p.subtract(b)).collect();
                if pieces.is_empty() {
                    break;
                }
            }
            out.extend(pieces);
        }
        CellSet { cells: out }
    }

    pub fn is_subset(&self, o: &Self) -> bool {
        self.difference(o).is_empty()
    }

    pub fn set_eq(&self, o: &Self) -> bool {
        self.is_subset(o) && o.is_subset(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(ivs: &[(u32, u32)], max: u32) -> Vec<bool> {
        let mut v = vec![false; max as usize + 1];
        for &(a, b) in ivs {
            for x in a..=b.min(max) {
                v[x as usize] = true;
            }
        }
        v
    }

    #[test]
    fn canonical_merges_adjacent() {
        let s = IntervalSet::from_intervals([(5, 9), (0, 4), (20, 30), (25, 26)]);
        assert_eq!(s.intervals(), &[(0, 9), (20, 30)]);
    }

    #[test]
    fn complement_edges() {
        assert_eq!(IntervalSet::empty().complement(10).intervals(), &[(0, 10)]);
        assert_eq!(IntervalSet::full(10).complement(10).intervals(), &[]);
        assert_eq!(
            AddressSet::range(0, 0x7fff_ffff).complement().intervals(),
            &[(0x8000_0000, u32::MAX)]
        );
    }

    #[test]
    fn cidr_from_interval() {
        assert_eq!(Cidr::from_interval(0, u32::MAX), Some(Cidr::new(0, 0)));
        assert_eq!(Cidr::from_interval(4, 7), Some(Cidr::new(4, 30)));
        assert_eq!(Cidr::from_interval(2, 5), None);
        assert_eq!(Cidr::from_interval(6, 9), None);
    }

    #[test]
    fn mask_prefixes() {
        assert_eq!(mask_prefix(0xffff_ff00), Some(24));
        assert_eq!(mask_prefix(0), Some(0));
        assert_eq!(mask_prefix(0xff00_ff00), None);
    }

    #[test]
    fn finite_set_algebra() {
        let a = FiniteSet::only(["a", "b"]);
        let not_b = FiniteSet::Except(["b"].into_iter().collect());
        assert!(!a.is_subset(&not_b));
        assert!(FiniteSet::only(["a"]).is_subset(&not_b));
        assert!(a.union(&not_b).is_all());
        assert_eq!(a.intersect(&not_b), FiniteSet::only(["a"]));
    }

    proptest::proptest! {
        #[test]
        fn interval_ops_match_membership(
            a in proptest::collection::vec((0u32..200, 0u32..40), 0..6),
            b in proptest::collection::vec((0u32..200, 0u32..40), 0..6),
        ) {
            let max = 255;
            let a: Vec<_> = a.into_iter().map(|(s, l)| (s, (s + l).min(max))).collect();
            let b: Vec<_> = b.into_iter().map(|(s, l)| (s, (s + l).min(max))).collect();
            let sa = IntervalSet::from_intervals(a.clone());
            let sb = IntervalSet::from_intervals(b.clone());
            let (ba, bb) = (brute(&a, max), brute(&b, max));
            // canonical shape
            for w in sa.intervals().windows(2) {
                proptest::prop_assert!(w[0].1 + 1 < w[1].0);
            }
            let u = sa.union(&sb);
            let i = sa.intersect(&sb);
            let d = sa.difference(&sb);
            let c = sa.complement(max);
            for x in 0..=max {
                let (ia, ib) = (ba[x as usize], bb[x as usize]);
                proptest::prop_assert_eq!(sa.contains(x), ia);
                proptest::prop_assert_eq!(u.contains(x), ia || ib);
                proptest::prop_assert_eq!(i.contains(x), ia && ib);
                proptest::prop_assert_eq!(d.contains(x), ia && !ib);
                proptest::prop_assert_eq!(c.contains(x), !ia);
            }
            let sub = (0..=max).all(|x| !ba[x as usize] || bb[x as usize]);
            proptest::prop_assert_eq!(sa.is_subset(&sb), sub);
        }
    }
}
