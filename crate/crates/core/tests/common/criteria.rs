//! The end-to-end checks shared by the acceptance runner and the regular
//! integration tests. Each returns a one-line summary or the first failure.
#![allow(dead_code)]

use super::*;
use fwcomp::analysis::{detect_shadowing, equivalent, find_difference, optimize};
use fwcomp::backends::{compile, first_mismatch, CompileError, Script};
use fwcomp::model::{Action, ObjectKind, Platform, RuleDirection};
use fwcomp::semantics::Evaluator;
use fwcomp::transform::{range_to_cidrs, AddrAtom, TransformError};
use std::collections::HashSet;
use std::process::Command;
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn listing_fidelity() -> Outcome {
    let t0 = Instant::now();
    let text = std::fs::read_to_string(corpus_path("listing")).map_err(|e| e.to_string())?;
    let db = fwbxml::parse(&text).map_err(|e| e.to_string())?;
    let named = |n: &str| db.objects().find(|o| o.name == n).ok_or(format!("no object named {n}"));

    let lan = named("officeLAN")?;
    ensure!(
        lan.kind
            == ObjectKind::Network {
                address: Ipv4Addr::new(10, 86, 81, 0),
                netmask: Ipv4Addr::new(255, 255, 255, 0)
            },
        "officeLAN is {:?}",
        lan.kind
    );
    let srv = named("MyServie")?;
    match &srv.kind {
        ObjectKind::UdpService(u) => {
            ensure!((u.src.start, u.src.end) == (30, 70), "source ports {:?}", u.src);
            ensure!((u.dst.start, u.dst.end) == (90, 92), "destination ports {:?}", u.dst);
        }
        k => return Err(format!("MyServie is {k:?}")),
    }

    let (fw_obj, fw) = db.firewall("MyFirewall").ok_or("no MyFirewall")?;
    ensure!(fw.platform.as_str() == "iptables", "platform {}", fw.platform);
    ensure!(fw.host_os == "linux24", "host OS {}", fw.host_os);
    let itfs: Vec<_> = db.interfaces(&fw.interfaces).collect();
    let names: Vec<_> = itfs.iter().map(|(o, _)| o.name.as_str()).collect();
    ensure!(names == ["if0", "if1", "l0"], "interfaces {names:?}");
    ensure!(
        itfs.iter().map(|(_, i)| i.dynamic).collect::<Vec<_>>() == [false, true, false],
        "only if1 is dynamic"
    );
    let if0_addr = db.resolve(&itfs[0].1.addresses[0]).map_err(|e| e.to_string())?;
    ensure!(
        if0_addr.kind
            == ObjectKind::Ipv4 {
                address: Ipv4Addr::new(192, 168, 1, 1),
                netmask: Ipv4Addr::new(255, 255, 255, 0)
            },
        "if0 address {:?}",
        if0_addr.kind
    );
    ensure!(itfs[0].1.phys.is_some(), "if0 has no MAC");
    ensure!(itfs[2].1.unprotected == Some(false), "l0 unprotected flag lost");

    let rules = fw.policy_rules();
    ensure!(rules.len() == 1, "{} rules", rules.len());
    let r = &rules[0];
    ensure!(r.action == Action::Deny && r.direction == RuleDirection::Both, "rule is {:?} {:?}", r.action, r.direction);
    ensure!(r.src.is_any() && r.itf.is_any() && r.when.is_any(), "rule 0 restricts more than dst and srv");
    ensure!(r.dst.refs == [lan.id.clone()] && !r.dst.negated, "dst {:?}", r.dst);
    ensure!(r.srv.refs == [srv.id.clone()] && !r.srv.negated, "srv {:?}", r.srv);

    let again = fwbxml::parse(&fwbxml::serialize(&db)).map_err(|e| e.to_string())?;
    ensure!(again == db, "serialize then parse changed the database");
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{} objects in {}, round trip identical", db.objects().count(), fw_obj.name))
}

pub fn conformance() -> Outcome {
    let mut dbs = HashMap::new();
    for c in CASES {
        check_case(c, &mut dbs)?;
    }
    ensure!(CASES.len() >= 30, "only {} cases", CASES.len());
    Ok(format!("{} hand-checked cases", CASES.len()))
}

/// The two-rule example plus `n` random policies: removing a rule reported as
/// shadowed never changes a verdict of the 2^10-packet universe.
pub fn shadowing(n: u64) -> Outcome {
    let text = r#"<FWObjectDatabase version="1"><Library id="l" name="l">
<Network id="n16" name="n16" address="1.2.3.4" netmask="255.255.0.0"/>
<IPv4 id="h" name="h" address="1.2.3.4" netmask="255.255.255.255"/>
<Firewall id="fw" name="fw" platform="iptables" host_OS="linux24">
<Interface id="fw-eth0" name="eth0"/>
<Policy id="p">
<PolicyRule id="r0" position="0" action="Deny"><Dst><ObjectRef ref="n16"/></Dst></PolicyRule>
<PolicyRule id="r1" position="1" action="Deny"><Dst><ObjectRef ref="h"/></Dst></PolicyRule>
</Policy></Firewall></Library></FWObjectDatabase>"#;
    let db = fwbxml::parse(text).map_err(|e| e.to_string())?;
    let rep = detect_shadowing(only_fw(&db).policy.as_ref().unwrap(), &db);
    ensure!(rep.len() == 1, "two-rule example gave {} reports", rep.len());
    ensure!(
        (rep[0].shadowing_position, rep[0].shadowed_position) == (0, 1),
        "reported {}",
        rep[0]
    );

    let u = small_universe();
    let mut reported = 0;
    for seed in 0..n {
        let db = load_text(&random_fwb(&mut rng(seed), &SMALL));
        let fw = only_fw(&db);
        let policy = fw.policy.clone().unwrap();
        let full = Evaluator::from_rules(&[], &policy.rules, &db).map_err(|e| e.to_string())?;
        let base: Vec<_> = u.packets().map(|p| full.evaluate(&p).unwrap()).collect();
        let dead: HashSet<u32> = detect_shadowing(&policy, &db).iter().map(|r| r.shadowed_position).collect();
        reported += dead.len();
        for &pos in &dead {
            let rest: Vec<_> = policy.rules.iter().filter(|r| r.position != pos).cloned().collect();
            let e = Evaluator::from_rules(&[], &rest, &db).map_err(|e| e.to_string())?;
            for (p, v) in u.packets().zip(&base) {
                let w = e.evaluate(&p).map_err(|e| e.to_string())?;
                ensure!(
                    w.action == v.action && w.matched_rule == v.matched_rule && w.counters_hit == v.counters_hit,
                    "seed {seed}: removing shadowed rule {pos} changes {p}: {v} became {w}"
                );
            }
        }
    }
    Ok(format!("example gives 1 anomaly; {reported} shadowed rules across {n} random policies are dead"))
}

/// Corpus policies over their critical universes and `n` random ones over the
/// /22 window universe keep every verdict after optimization.
pub fn optimize_safety(n: u64) -> Outcome {
    let mut removed = 0usize;
    for path in corpus_files() {
        let b = bind(&path);
        let fw = only_fw(&b.oracle_db);
        let p = fw.policy.clone().unwrap();
        let q = optimize(&p, &b.oracle_db);
        removed += p.rules.len().saturating_sub(q.rules.len());
        let u = universe_for(&b.oracle_db, 1 << 22);
        if let Some(pkt) = find_difference(&p, &q, &u, &b.oracle_db).map_err(|e| e.to_string())? {
            return Err(format!("{}: optimized policy differs on {pkt}", stem(&path)));
        }
    }
    let u = wide_universe();
    for seed in 0..n {
        let db = load_text(&random_fwb(&mut rng(1000 + seed), &WIDE));
        let p = only_fw(&db).policy.clone().unwrap();
        let q = optimize(&p, &db);
        removed += p.rules.len().saturating_sub(q.rules.len());
        ensure!(
            equivalent(&p, &q, &u, &db).map_err(|e| e.to_string())?,
            "seed {seed}: optimized policy differs on {}",
            find_difference(&p, &q, &u, &db).unwrap().unwrap()
        );
    }
    Ok(format!("{} corpus + {n} random policies equivalent, {removed} rules removed", corpus_files().len()))
}

/// Corpus firewalls each target cannot express.
pub const OUTSIDE_CAPABILITIES: &[(&str, Platform)] = &[
    ("dynamic", Platform::Iptables),
    ("mac", Platform::Pf),
    ("mac", Platform::Ipfilter),
    ("mixed_nat", Platform::Iptables),
    ("mixed_nat", Platform::Ipfilter),
    ("nat_chain", Platform::Iptables),
    ("nat_chain", Platform::Ipfilter),
    ("tables", Platform::Iptables),
    ("tables", Platform::Ipfilter),
    ("time", Platform::Pf),
    ("time", Platform::Ipfilter),
];

/// Every corpus firewall on every target that can express it: the
/// interpreted script and the model agree on every packet of the universe.
pub fn cross_target() -> Outcome {
    let mut pairs = 0;
    let mut packets = 0u64;
    for path in corpus_files() {
        let name = stem(&path);
        let b = bind(&path);
        let u = universe_for(&b.oracle_db, 1 << 22);
        for t in Platform::ALL {
            let res = compile(only_fw(&b.compile_db), t, &b.compile_db);
            let expect_unsupported = OUTSIDE_CAPABILITIES.contains(&(name.as_str(), t));
            let (lowered, script) = match (res, expect_unsupported) {
                (Ok(ls), false) => ls,
                (Err(CompileError::Transform(TransformError::Unsupported { .. })), true) => continue,
                (Ok(_), true) => return Err(format!("{name} on {t}: compiled but should be unsupported")),
                (Err(e), _) => return Err(format!("{name} on {t}: {e}")),
            };
            let reparsed = Script::from_text(t, &script.text());
            ensure!(reparsed.lines == script.lines, "{name} on {t}: text does not round-trip");
            if name == "snat" && t == Platform::Iptables {
                let lan = AddrAtom::Cidr("192.168.1.0/24".parse().unwrap());
                ensure!(
                    lowered.filter.iter().any(|r| r.origin == Some(0) && r.src.atom == lan),
                    "snat on iptables: filter sources were not moved before SNAT"
                );
            }
            let fw = only_fw(&b.oracle_db);
            if let Some(m) = first_mismatch(&script, fw, &b.oracle_db, u.packets(), &b.env)? {
                return Err(format!("{name} on {t}: {m}"));
            }
            pairs += 1;
            packets += u.size() as u64;
        }
    }
    Ok(format!(
        "{pairs} firewall/target pairs agree on {packets} packets, {} pairs outside capabilities",
        OUTSIDE_CAPABILITIES.len()
    ))
}

/// Every range inside each window: exact union and a block count equal to
/// the optimum found by dynamic programming over all aligned blocks.
pub fn range_cover(windows: &[u32]) -> Outcome {
    let mut ranges = 0u64;
    for &w in windows {
        let n = 4096usize;
        for i in 0..n {
            let a = w + i as u32;
            // best[k]: fewest aligned blocks covering exactly a..a+k-1
            let mut best = vec![u32::MAX; n - i + 1];
            best[0] = 0;
            for k in 0..n - i {
                let here = best[k];
                if here == u32::MAX {
                    continue;
                }
                let start = u64::from(a) + k as u64;
                for bits in 0..=12u32 {
                    let size = 1u64 << bits;
                    if !start.is_multiple_of(size) || k as u64 + size > (n - i) as u64 {
                        break;
                    }
                    let j = k + size as usize;
                    best[j] = best[j].min(here + 1);
                }
            }
            for (k, &opt) in best.iter().enumerate().skip(1) {
                let b = a + (k as u32 - 1);
                let blocks = range_to_cidrs(a, b);
                let mut next = u64::from(a);
                for c in &blocks {
                    ensure!(u64::from(c.base()) == next, "{a}..{b}: gap or overlap at {c}");
                    ensure!(c.base() & !fwcomp::model::sets::prefix_mask(c.prefix()) == 0, "{c} is not aligned");
                    next = u64::from(c.last()) + 1;
                }
                ensure!(next == u64::from(b) + 1, "{a}..{b}: union stops at {next}");
                ensure!(blocks.len() as u32 == opt, "{a}..{b}: {} blocks, optimum {opt}", blocks.len());
                ranges += 1;
            }
        }
    }
    Ok(format!("{ranges} ranges in {} windows exact and minimal", windows.len()))
}

pub const RANGE_WINDOWS: [u32; 3] = [0, 0x0a00_0800, 0xffff_f000];

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn fwcomp(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_fwcomp"))
        .args(args)
        .env_remove("FWCOMP_TABLE_DIR")
        .output()
        .expect("run fwcomp");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// A time rule on pf and a dynamic interface address on iptables both exit 2
/// with the feature named and write nothing.
pub fn capability_errors() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().to_str().unwrap();
    for (file, target, code) in [("time", "pf", "time"), ("dynamic", "iptables", "dynamic-interface-address")] {
        let input = corpus_path(file);
        let r = fwcomp(&["compile", input.to_str().unwrap(), "--target", target, "-o", out]);
        ensure!(r.code == 2, "{file} on {target}: exit {} ({})", r.code, r.stderr.trim());
        let want = format!("UnsupportedFeature({code})");
        ensure!(r.stderr.contains(&want), "{file} on {target}: stderr lacks {want}: {}", r.stderr.trim());
        let written = std::fs::read_dir(dir.path()).unwrap().count();
        ensure!(written == 0, "{file} on {target}: {written} files written");
    }
    // the same firewalls compile where the feature exists
    for (file, target) in [("time", "iptables"), ("dynamic", "pf")] {
        let input = corpus_path(file);
        let r = fwcomp(&["compile", input.to_str().unwrap(), "--target", target, "-o", out]);
        ensure!(r.code == 0, "{file} on {target}: exit {} ({})", r.code, r.stderr.trim());
    }
    Ok("time on pf and dynamic address on iptables exit 2".into())
}

