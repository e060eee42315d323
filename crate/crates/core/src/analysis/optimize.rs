use super::detect_shadowing;
use crate::model::*;
use std::collections::BTreeSet;

/// Removes shadowed rules and merges adjacent rules that differ in a single
/// field, repeating until nothing changes. Positions are renumbered.
pub fn optimize(policy: &Policy, db: &ObjectDatabase) -> Policy {
    let mut p = policy.clone();
    loop {
        let before = p.rules.len();
        remove_shadowed(&mut p, db);
        merge_adjacent(&mut p);
        if p.rules.len() == before {
            break;
        }
    }
    p.renumber();
    p
}

fn remove_shadowed(p: &mut Policy, db: &ObjectDatabase) {
    let dead: BTreeSet<u32> = detect_shadowing(p, db)
        .into_iter()
        .map(|a| a.shadowed_position)
        .collect();
    p.rules.retain(|r| r.disabled || !dead.contains(&r.position));
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Src,
    Dst,
    Srv,
    Itf,
    When,
    Direction,
}

fn element(r: &PolicyRule, f: Field) -> Option<&MatchElement> {
    match f {
        Field::Src => Some(&r.src),
        Field::Dst => Some(&r.dst),
        Field::Srv => Some(&r.srv),
        Field::Itf => Some(&r.itf),
        Field::When => Some(&r.when),
        Field::Direction => None,
    }
}

const FIELDS: [Field; 6] = [Field::Src, Field::Dst, Field::Srv, Field::Itf, Field::When, Field::Direction];

/// The single field in which `a` and `b` differ, if exactly one does.
fn single_difference(a: &PolicyRule, b: &PolicyRule) -> Option<Field> {
    let mut diff = FIELDS.iter().copied().filter(|&f| match (element(a, f), element(b, f)) {
        (Some(x), Some(y)) => !x.same_as(y),
        _ => a.direction != b.direction,
    });
    let first = diff.next()?;
    diff.next().is_none().then_some(first)
}

fn merged(a: &PolicyRule, b: &PolicyRule) -> Option<PolicyRule> {
    if a.disabled || b.disabled || a.action != b.action || !a.action.is_terminal() {
        return None;
    }
    let field = single_difference(a, b)?;
    let mut out = a.clone();
    match field {
        Field::Direction => out.direction = RuleDirection::Both,
        f => {
            let (x, y) = (element(a, f)?, element(b, f)?);
            // The union of two negated elements is not a plain ref list.
            if x.negated || y.negated {
                return None;
            }
            let mut refs = x.refs.clone();
            for r in &y.refs {
                if !refs.contains(r) {
                    refs.push(r.clone());
                }
            }
            let e = MatchElement { refs, negated: false };
            match f {
                Field::Src => out.src = e,
                Field::Dst => out.dst = e,
                Field::Srv => out.srv = e,
                Field::Itf => out.itf = e,
                Field::When => out.when = e,
                Field::Direction => unreachable!(),
            }
        }
    }
    Some(out)
}

fn merge_adjacent(p: &mut Policy) {
    let mut out: Vec<PolicyRule> = Vec::with_capacity(p.rules.len());
    for r in p.rules.drain(..) {
        if let Some(m) = out.last().and_then(|last| merged(last, &r)) {
            *out.last_mut().expect("checked") = m;
        } else {
            out.push(r);
        }
    }
    p.rules = out;
}
