//! Target-head selection on the R² graph.
//!
//! A binary search over the edge threshold `tau` prunes the graph to edges
//! with `r2 >= tau`; at each threshold a greedy pass adds targets while every
//! selected target keeps at least `m` in-neighbours that are not themselves
//! targets. After the search each target's references are cut back to its
//! `m` strongest surviving in-neighbours.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::actv::HeadId;
use crate::error::{Error, Result};
use crate::probe::R2Graph;

pub const SELECTION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Fraction of all heads to turn into targets.
    pub fraction: f64,
    /// References a head needs to be a valid target.
    pub min_refs: usize,
    pub eps_tau: f64,
    pub max_iters: usize,
}

impl SelectionParams {
    pub fn new(fraction: f64, min_refs: usize) -> Self {
        Self {
            fraction,
            min_refs,
            eps_tau: 1e-4,
            max_iters: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidArgument(format!(
                "fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        if self.min_refs == 0 {
            return Err(Error::InvalidArgument("min_refs must be >= 1".into()));
        }
        if self.eps_tau.is_nan() || self.eps_tau <= 0.0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "eps_tau must be > 0 and max_iters >= 1".into(),
            ));
        }
        Ok(())
    }

    fn goal(&self, nodes: usize) -> f64 {
        self.fraction * nodes as f64
    }

    /// Targets a greedy pass stops at: `ceil(f * |V|)`.
    fn cap(&self, nodes: usize) -> usize {
        (self.goal(nodes) - 1e-9).ceil().max(0.0) as usize
    }

    fn reaches_goal(&self, targets: usize, nodes: usize) -> bool {
        targets as f64 + 1e-9 >= self.goal(nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub tau: f64,
    pub targets: usize,
    pub achieved_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRefs {
    pub target: HeadId,
    /// Strongest first.
    pub refs: Vec<HeadId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted by `(layer, head)`.
    pub targets: Vec<HeadId>,
    pub tau: f64,
    /// One entry per target, in `targets` order.
    pub refs_per_target: Vec<TargetRefs>,
    pub achieved_fraction: f64,
    pub feasible: bool,
    /// Every greedy pass in evaluation order.
    pub trace: Vec<TraceStep>,
}

impl SelectionResult {
    pub fn refs_of(&self, target: HeadId) -> Option<&[HeadId]> {
        self.refs_per_target
            .iter()
            .find(|e| e.target == target)
            .map(|e| e.refs.as_slice())
    }

    pub fn is_target(&self, head: HeadId) -> bool {
        self.targets.binary_search(&head).is_ok()
    }

    /// Heads that some target reads from.
    pub fn reference_heads(&self) -> BTreeSet<HeadId> {
        self.refs_per_target
            .iter()
            .flat_map(|e| e.refs.iter().copied())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            #[serde(flatten)]
            result: &'a SelectionResult,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            schema_version: SELECTION_SCHEMA_VERSION,
            result: self,
        })?)
    }
}

/// The graph restricted to edges with weight `>= tau`, as index lists.
struct Pruned {
    in_nbrs: Vec<Vec<(usize, f64)>>,
    out_nbrs: Vec<Vec<usize>>,
}

impl Pruned {
    fn new(adj: &[Vec<(usize, f64)>], tau: f64) -> Self {
        let n = adj.len();
        let mut in_nbrs = vec![Vec::new(); n];
        let mut out_nbrs = vec![Vec::new(); n];
        for (t, list) in adj.iter().enumerate() {
            for &(r, w) in list {
                if w >= tau {
                    in_nbrs[t].push((r, w));
                    out_nbrs[r].push(t);
                }
            }
        }
        for list in &mut in_nbrs {
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        Self { in_nbrs, out_nbrs }
    }
}

/// Whether every member of `set` keeps at least `m` in-neighbours outside
/// `set`. Shared with the verifier and used as the debug cross-check of the
/// incremental bookkeeping in the greedy pass.
fn set_is_valid(in_nbrs: &[Vec<(usize, f64)>], in_set: &[bool], m: usize) -> bool {
    in_set.iter().enumerate().filter(|(_, &s)| s).all(|(v, _)| {
        in_nbrs[v].iter().filter(|(u, _)| !in_set[*u]).count() >= m
    })
}

fn greedy_pass(pruned: &Pruned, m: usize, cap: usize) -> Vec<usize> {
    let n = pruned.in_nbrs.len();
    let mut candidates: Vec<(usize, f64)> = (0..n)
        .filter(|&v| pruned.in_nbrs[v].len() >= m)
        .map(|v| (v, pruned.in_nbrs[v].iter().take(m).map(|(_, w)| w).sum()))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut in_t = vec![false; n];
    // In-neighbours of each node that are not targets.
    let mut avail: Vec<usize> = pruned.in_nbrs.iter().map(Vec::len).collect();
    let mut chosen = Vec::new();
    for (c, _) in candidates {
        if chosen.len() >= cap {
            break;
        }
        if avail[c] < m {
            continue;
        }
        if pruned.out_nbrs[c].iter().any(|&u| in_t[u] && avail[u] <= m) {
            continue;
        }
        in_t[c] = true;
        for &u in &pruned.out_nbrs[c] {
            avail[u] -= 1;
        }
        chosen.push(c);
        debug_assert!(set_is_valid(&pruned.in_nbrs, &in_t, m));
    }
    chosen
}

/// Number of targets the greedy pass selects at a fixed threshold.
pub fn greedy_targets_at(g: &R2Graph, p: &SelectionParams, tau: f64) -> Result<Vec<HeadId>> {
    p.validate()?;
    let pruned = Pruned::new(&g.in_adjacency(), tau);
    let mut t: Vec<HeadId> = greedy_pass(&pruned, p.min_refs, p.cap(g.num_nodes()))
        .into_iter()
        .map(|i| g.head_at(i))
        .collect();
    t.sort();
    Ok(t)
}

pub fn select_targets(g: &R2Graph, p: &SelectionParams) -> Result<SelectionResult> {
    p.validate()?;
    if g.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let n = g.num_nodes();
    let cap = p.cap(n);
    let adj = g.in_adjacency();

    let mut trace = Vec::new();
    let mut passes: Vec<(f64, Vec<usize>)> = Vec::new();
    let run = |tau: f64, trace: &mut Vec<TraceStep>, passes: &mut Vec<(f64, Vec<usize>)>| {
        let chosen = greedy_pass(&Pruned::new(&adj, tau), p.min_refs, cap);
        trace.push(TraceStep {
            tau,
            targets: chosen.len(),
            achieved_fraction: chosen.len() as f64 / n as f64,
        });
        let found = chosen.len();
        passes.push((tau, chosen));
        found
    };

    let (mut low, mut high) = (0.0_f64, 1.0_f64);
    for _ in 0..p.max_iters {
        if high - low < p.eps_tau {
            break;
        }
        let tau = 0.5 * (low + high);
        let found = run(tau, &mut trace, &mut passes);
        if p.reaches_goal(found, n) {
            low = tau;
        } else {
            high = tau;
        }
    }
    if !passes.iter().any(|(_, t)| p.reaches_goal(t.len(), n)) {
        // The bisection never probes tau = 0 itself; that pass decides
        // feasibility.
        run(0.0, &mut trace, &mut passes);
    }

    // Prefer passes reaching the goal, then achieved fraction closest to f,
    // then the larger threshold.
    let (tau, chosen) = passes
        .into_iter()
        .min_by(|(ta, a), (tb, b)| {
            let key = |t: &Vec<usize>| {
                (
                    !p.reaches_goal(t.len(), n),
                    (t.len() as f64 / n as f64 - p.fraction).abs(),
                )
            };
            let (fa, da) = key(a);
            let (fb, db) = key(b);
            fa.cmp(&fb).then(da.total_cmp(&db)).then(tb.total_cmp(ta))
        })
        .expect("at least one pass");

    let pruned = Pruned::new(&adj, tau);
    let mut in_t = vec![false; n];
    for &c in &chosen {
        in_t[c] = true;
    }
    let mut targets: Vec<usize> = chosen.clone();
    targets.sort_unstable();
    let refs_per_target = targets
        .iter()
        .map(|&t| TargetRefs {
            target: g.head_at(t),
            refs: pruned.in_nbrs[t]
                .iter()
                .filter(|(u, _)| !in_t[*u])
                .take(p.min_refs)
                .map(|&(u, _)| g.head_at(u))
                .collect(),
        })
        .collect();
    Ok(SelectionResult {
        targets: targets.iter().map(|&t| g.head_at(t)).collect(),
        tau,
        refs_per_target,
        achieved_fraction: chosen.len() as f64 / n as f64,
        feasible: p.reaches_goal(chosen.len(), n),
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub heads: Vec<HeadId>,
    pub message: String,
}

/// Re-checks every invariant of a selection result against its graph.
/// An empty list means the result is sound.
pub fn verify_selection(g: &R2Graph, result: &SelectionResult, p: &SelectionParams) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |heads: Vec<HeadId>, message: String| out.push(Violation { heads, message });
    let n = g.num_nodes();
    let target_set: BTreeSet<HeadId> = result.targets.iter().copied().collect();

    if !(0.0..=1.0).contains(&result.tau) {
        flag(vec![], format!("tau {} outside [0, 1]", result.tau));
    }
    if target_set.len() != result.targets.len() {
        flag(result.targets.clone(), "duplicate targets".into());
    }
    for &t in &result.targets {
        if !g.contains_head(t) {
            flag(vec![t], format!("target {t} is not a head of the graph"));
        }
    }
    let expected_frac = result.targets.len() as f64 / n as f64;
    if (result.achieved_fraction - expected_frac).abs() > 1e-12 {
        flag(
            vec![],
            format!(
                "achieved_fraction {} but {} of {n} heads are targets",
                result.achieved_fraction,
                result.targets.len()
            ),
        );
    }
    if result.feasible != p.reaches_goal(result.targets.len(), n) {
        flag(
            vec![],
            format!(
                "feasible={} inconsistent with {} targets for goal {}",
                result.feasible,
                result.targets.len(),
                p.goal(n)
            ),
        );
    }
    if result.feasible && result.targets.len() > p.cap(n) {
        flag(vec![], format!("{} targets exceed the cap {}", result.targets.len(), p.cap(n)));
    }
    let listed: BTreeSet<HeadId> = result.refs_per_target.iter().map(|e| e.target).collect();
    if listed != target_set || listed.len() != result.refs_per_target.len() {
        flag(vec![], "refs_per_target does not list each target exactly once".into());
    }

    for entry in &result.refs_per_target {
        let t = entry.target;
        if entry.refs.len() > p.min_refs {
            flag(vec![t], format!("{t} keeps {} refs, more than m={}", entry.refs.len(), p.min_refs));
        }
        if result.feasible && entry.refs.len() != p.min_refs {
            flag(vec![t], format!("{t} has {} refs, expected exactly m={}", entry.refs.len(), p.min_refs));
        }
        for (i, &r) in entry.refs.iter().enumerate() {
            if r == t || entry.refs[..i].contains(&r) {
                flag(vec![t, r], format!("{t} lists {r} as a self or duplicate reference"));
            }
            if target_set.contains(&r) {
                flag(vec![t, r], format!("reference {r} of {t} is itself a target"));
            }
            if !g.constraint().admits(r, t) {
                flag(vec![t, r], format!("edge {r} -> {t} violates the layer constraint"));
            }
            match g.edge(r, t) {
                None => flag(vec![t, r], format!("no edge {r} -> {t} in the graph")),
                Some(w) if w < result.tau => flag(
                    vec![t, r],
                    format!("edge {r} -> {t} has r2 {w} below tau {}", result.tau),
                ),
                Some(_) => {}
            }
        }
        // The kept references must be the strongest surviving in-neighbours.
        let weakest_kept = entry
            .refs
            .iter()
            .filter_map(|&r| g.edge(r, t))
            .fold(f64::INFINITY, f64::min);
        let dropped_better = g
            .ranked_in_edges(t)
            .into_iter()
            .filter(|(r, w)| *w >= result.tau && !target_set.contains(r) && !entry.refs.contains(r))
            .find(|(_, w)| *w > weakest_kept || entry.refs.len() < p.min_refs);
        if let Some((r, w)) = dropped_better {
            flag(
                vec![t, r],
                format!("{t} drops eligible reference {r} (r2 {w}) in favour of weaker or fewer refs"),
            );
        }
    }
    out
}
