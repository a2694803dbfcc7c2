//! Static memory planning over a single byte arena.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::hir::{HirModule, KindTag, ValueId};

pub const ALIGNMENT: usize = 8;

/// Inclusive range of schedule steps during which a buffer must stay intact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Interval {
    pub first: usize,
    pub last: usize,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.first <= other.last && other.first <= self.last
    }
}

pub type Liveness = BTreeMap<String, Interval>;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct MemoryPlan {
    pub arena_bytes: usize,
    pub offsets: BTreeMap<String, usize>,
    pub alignment: usize,
}

pub fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Live interval of every graph input and compute-op output. Parameters are
/// not included.
pub fn liveness(schedule: &[ValueId], m: &HirModule) -> Liveness {
    let step: BTreeMap<&str, usize> = schedule.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let final_step = schedule.len().saturating_sub(1);
    let mut live = Liveness::new();
    for op in &m.ops {
        let first = match op.kind.tag() {
            KindTag::Const => continue,
            KindTag::Input => 0,
            _ => match step.get(op.id.as_str()) {
                Some(&s) => s,
                None => continue,
            },
        };
        live.insert(op.id.clone(), Interval { first, last: first });
    }
    for op in &m.ops {
        let Some(&s) = step.get(op.id.as_str()) else { continue };
        for input in &op.inputs {
            if let Some(iv) = live.get_mut(input) {
                iv.last = iv.last.max(s);
            }
        }
    }
    for out in &m.outputs {
        if let Some(iv) = live.get_mut(out) {
            iv.last = final_step.max(iv.last);
        }
    }
    live
}

/// Byte sizes of the values that live in the arena: compute-op outputs that
/// are not module outputs.
pub fn arena_sizes(m: &HirModule) -> BTreeMap<String, usize> {
    m.compute_ops()
        .filter(|op| !m.outputs.contains(&op.id))
        .map(|op| {
            let elems: usize = op.shape().expect("shape-inferred module").iter().product();
            (op.id.clone(), 4 * elems)
        })
        .collect()
}

/// First-fit decreasing placement. Buffers are placed largest first (ties by
/// name) at the lowest aligned offset that does not collide with an already
/// placed buffer whose lifetime overlaps.
pub fn plan(liveness: &Liveness, sizes: &BTreeMap<String, usize>) -> MemoryPlan {
    const ALWAYS: Interval = Interval { first: 0, last: usize::MAX };
    let mut order: Vec<(&String, usize)> = sizes.iter().map(|(k, &v)| (k, align_up(v))).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut placed: Vec<(Interval, usize, usize)> = Vec::new();
    let mut offsets = BTreeMap::new();
    let mut arena = 0;
    for (name, size) in order {
        let live = liveness.get(name).copied().unwrap_or(ALWAYS);
        let mut conflicts: Vec<(usize, usize)> = placed
            .iter()
            .filter(|(iv, _, _)| iv.overlaps(&live))
            .map(|&(_, off, sz)| (off, off + sz))
            .collect();
        conflicts.sort_unstable();
        let mut offset = 0;
        for (start, end) in conflicts {
            if offset + size <= start {
                break;
            }
            offset = offset.max(end);
        }
        placed.push((live, offset, size));
        offsets.insert(name.clone(), offset);
        arena = arena.max(offset + size);
    }
    MemoryPlan {
        arena_bytes: arena,
        offsets,
        alignment: ALIGNMENT,
    }
}

impl MemoryPlan {
    /// Checks alignment, arena bounds and pairwise disjointness of buffers
    /// that are live at the same time.
    pub fn check(&self, liveness: &Liveness, sizes: &BTreeMap<String, usize>) -> Result<(), String> {
        let mut entries = Vec::new();
        for (name, &size) in sizes {
            let off = *self.offsets.get(name).ok_or_else(|| format!("`{name}` has no offset"))?;
            if off % ALIGNMENT != 0 {
                return Err(format!("`{name}` at unaligned offset {off}"));
            }
            if off + size > self.arena_bytes {
                return Err(format!("`{name}` ends past the arena"));
            }
            entries.push((name, off, size, liveness.get(name)));
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                let both_live = match (a.3, b.3) {
                    (Some(x), Some(y)) => x.overlaps(y),
                    _ => true,
                };
                if both_live && a.2 > 0 && b.2 > 0 && a.1 < b.1 + b.2 && b.1 < a.1 + a.2 {
                    return Err(format!("`{}` and `{}` overlap while both live", a.0, b.0));
                }
            }
        }
        Ok(())
    }
}
