//! Incidence structure and cycle basis of the AC network.
//!
//! The DC-family formulations express Kirchhoff's voltage law directly on a
//! fundamental cycle basis instead of carrying bus angle variables, so both
//! the incidence matrix and the basis must be deterministic and orientable.

use std::collections::VecDeque;

use crate::netmodel::NetworkCase;

/// Sparse bus-by-branch incidence matrix over the AC branches: +1 at the
/// from-bus, -1 at the to-bus of each branch.
#[derive(Debug, Clone)]
pub struct IncidenceMatrix {
    pub n_buses: usize,
    /// Branch -> (from bus position, to bus position).
    pub columns: Vec<(usize, usize)>,
}

impl IncidenceMatrix {
    pub fn entry(&self, bus: usize, branch: usize) -> i8 {
        let (from, to) = self.columns[branch];
        if bus == from {
            1
        } else if bus == to {
            -1
        } else {
            0
        }
    }

    /// Per-bus list of (branch, sign) over all incident branches.
    pub fn incident(&self) -> Vec<Vec<(usize, i8)>> {
        let mut out = vec![Vec::new(); self.n_buses];
        for (l, &(from, to)) in self.columns.iter().enumerate() {
            out[from].push((l, 1));
            out[to].push((l, -1));
        }
        out
    }
}

/// Fundamental cycles of the AC network. Each cycle lists (branch position,
/// orientation) pairs; the orientation is +1 where the branch points along
/// the cycle's traversal direction.
#[derive(Debug, Clone)]
pub struct CycleBasis {
    pub cycles: Vec<Vec<(usize, i8)>>,
}

/// Build the incidence matrix of the AC subgraph, with bus positions taken
/// from the case's bus order.
pub fn build_incidence(case: &NetworkCase) -> IncidenceMatrix {
    let idx = case.bus_index();
    let columns = case
        .ac_branches
        .iter()
        .map(|br| (idx[&br.from_bus], idx[&br.to_bus]))
        .collect();
    IncidenceMatrix { n_buses: case.buses.len(), columns }
}

/// Build a fundamental cycle basis from a breadth-first spanning forest.
///
/// Traversal starts at the lowest bus id of each component and explores
/// branches in ascending branch-id order, which makes the basis reproducible
/// across runs. Every non-tree branch (chord) closes exactly one cycle
/// oriented along the chord's own direction.
pub fn build_cycle_basis(case: &NetworkCase) -> CycleBasis {
    let n = case.buses.len();
    let incidence = build_incidence(case);

    // Adjacency sorted by branch id for deterministic tie-breaking.
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut branch_order: Vec<usize> = (0..case.ac_branches.len()).collect();
    branch_order.sort_by_key(|&l| case.ac_branches[l].id);
    for &l in &branch_order {
        let (from, to) = incidence.columns[l];
        adjacency[from].push((l, to));
        adjacency[to].push((l, from));
    }

    // Bus visit order: ascending bus id.
    let mut roots: Vec<usize> = (0..n).collect();
    roots.sort_by_key(|&i| case.buses[i].id);

    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n]; // (parent bus, branch)
    let mut depth = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut in_tree = vec![false; case.ac_branches.len()];

    for &root in &roots {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(bus) = queue.pop_front() {
            for &(branch, other) in &adjacency[bus] {
                if !seen[other] {
                    seen[other] = true;
                    in_tree[branch] = true;
                    parent[other] = Some((bus, branch));
                    depth[other] = depth[bus] + 1;
                    queue.push_back(other);
                }
            }
        }
    }

    // Sign of traversing `branch` from bus `at` towards the opposite end.
    let step_sign = |branch: usize, at: usize| -> i8 {
        if incidence.columns[branch].0 == at {
            1
        } else {
            -1
        }
    };

    let mut cycles = Vec::new();
    for &chord in &branch_order {
        if in_tree[chord] {
            continue;
        }
        let (from, to) = incidence.columns[chord];
        // Walk both endpoints up to their common ancestor.
        let mut up_from: Vec<(usize, i8)> = Vec::new(); // steps from -> lca
        let mut up_to: Vec<(usize, i8)> = Vec::new(); // steps to -> lca
        let (mut a, mut b) = (from, to);
        while depth[a] > depth[b] {
            let (p, e) = parent[a].expect("non-root bus has a parent");
            up_from.push((e, step_sign(e, a)));
            a = p;
        }
        while depth[b] > depth[a] {
            let (p, e) = parent[b].expect("non-root bus has a parent");
            up_to.push((e, step_sign(e, b)));
            b = p;
        }
        while a != b {
            let (pa, ea) = parent[a].expect("distinct roots cannot share a chord");
            let (pb, eb) = parent[b].expect("distinct roots cannot share a chord");
            up_from.push((ea, step_sign(ea, a)));
            up_to.push((eb, step_sign(eb, b)));
            a = pa;
            b = pb;
        }

        // Cycle traversal: chord (from -> to), then to -> lca, then lca -> from.
        let mut cycle = vec![(chord, 1i8)];
        cycle.extend(up_to.iter().copied());
        cycle.extend(up_from.iter().rev().map(|&(e, s)| (e, -s)));
        cycles.push(cycle);
    }

    CycleBasis { cycles }
}

/// Number of connected components of the AC subgraph (synchronous islands).
pub fn ac_components(case: &NetworkCase) -> usize {
    let n = case.buses.len();
    let incidence = build_incidence(case);
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(from, to) in &incidence.columns {
        adjacency[from].push(to);
        adjacency[to].push(from);
    }
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    components
}

/// Bus positions grouped by synchronous island.
///
/// Each island is sorted by bus id, so the first entry is the natural
/// reference (slack) position, and islands are ordered by that entry.
pub fn ac_islands(case: &NetworkCase) -> Vec<Vec<usize>> {
    let n = case.buses.len();
    let incidence = build_incidence(case);
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(from, to) in &incidence.columns {
        adjacency[from].push(to);
        adjacency[to].push(from);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| case.buses[i].id);
    let mut seen = vec![false; n];
    let mut islands = Vec::new();
    for start in order {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut members = vec![start];
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    members.push(j);
                    stack.push(j);
                }
            }
        }
        members.sort_by_key(|&i| case.buses[i].id);
        islands.push(members);
    }
    islands
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{AcBranch, Bus, NetworkCase};
    use proptest::prelude::*;

    fn grid(edges: &[(u32, u32)]) -> NetworkCase {
        let mut bus_ids: Vec<u32> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
        bus_ids.sort_unstable();
        bus_ids.dedup();
        NetworkCase {
            name: String::new(),
            mva_base: 100.0,
            buses: bus_ids.into_iter().map(|id| Bus { id, voltage_class: None }).collect(),
            ac_branches: edges
                .iter()
                .enumerate()
                .map(|(i, &(from_bus, to_bus))| AcBranch {
                    id: i as u32 + 1,
                    from_bus,
                    to_bus,
                    r: 0.01,
                    x: 0.1,
                    b_sh: 0.0,
                    f_max: 1.0,
                    a: 1.0,
                    theta_max: 0.5,
                    u_min: 1.0,
                    u_max: 1.0,
                    c: 0.0,
                    length_km: None,
                })
                .collect(),
            dc_branches: Vec::new(),
            sources: Vec::new(),
        }
    }

    #[test]
    fn single_line_gets_a_signed_column() {
        let case = grid(&[(1, 2)]);
        let k = build_incidence(&case);
        assert_eq!(k.entry(0, 0), 1);
        assert_eq!(k.entry(1, 0), -1);
    }

    #[test]
    fn triangle_columns_sum_to_zero_and_close_one_cycle() {
        let case = grid(&[(1, 2), (2, 3), (1, 3)]);
        let k = build_incidence(&case);
        for l in 0..3 {
            let sum: i32 = (0..3).map(|n| k.entry(n, l) as i32).sum();
            assert_eq!(sum, 0);
        }
        let basis = build_cycle_basis(&case);
        assert_eq!(basis.cycles.len(), 1);
        let cycle = &basis.cycles[0];
        assert_eq!(cycle.len(), 3);
        let mut branches: Vec<usize> = cycle.iter().map(|&(l, _)| l).collect();
        branches.sort_unstable();
        assert_eq!(branches, vec![0, 1, 2]);
        assert!(cycle.iter().all(|&(_, s)| s == 1 || s == -1));
    }

    #[test]
    fn trees_have_no_cycles() {
        let case = grid(&[(1, 2), (2, 3), (2, 4), (4, 5)]);
        assert!(build_cycle_basis(&case).cycles.is_empty());
    }

    #[test]
    fn parallel_branches_close_a_two_edge_cycle() {
        let case = grid(&[(1, 2), (1, 2)]);
        let basis = build_cycle_basis(&case);
        assert_eq!(basis.cycles.len(), 1);
        let cycle = &basis.cycles[0];
        assert_eq!(cycle.len(), 2);
        // Both branches point the same way, so the cycle must traverse them
        // with opposite orientation.
        let total: i8 = cycle.iter().map(|&(_, s)| s).sum();
        assert_eq!(total, 0);
    }

    fn closed_walk_violation(case: &NetworkCase, cycle: &[(usize, i8)]) -> i32 {
        // Interpreting the cycle as a unit circulation, flow must be
        // conserved at every bus.
        let k = build_incidence(case);
        let mut net = vec![0i32; case.buses.len()];
        for &(l, s) in cycle {
            let (from, to) = k.columns[l];
            net[from] += s as i32;
            net[to] -= s as i32;
        }
        net.iter().map(|v| v.abs()).sum()
    }

    #[test]
    fn fundamental_cycles_are_closed_walks() {
        let case = grid(&[(1, 2), (2, 3), (1, 3), (3, 4), (4, 5), (3, 5), (2, 5)]);
        let basis = build_cycle_basis(&case);
        assert_eq!(basis.cycles.len(), 7 - 5 + 1);
        for cycle in &basis.cycles {
            assert_eq!(closed_walk_violation(&case, cycle), 0);
        }
    }

    #[test]
    fn basis_is_deterministic() {
        let case = grid(&[(1, 2), (2, 3), (1, 3), (3, 4), (1, 4)]);
        let a = build_cycle_basis(&case);
        let b = build_cycle_basis(&case);
        assert_eq!(a.cycles, b.cycles);
    }

    #[test]
    fn islands_are_grouped_and_sorted_by_bus_id() {
        let case = grid(&[(7, 2), (2, 9), (4, 5)]);
        // Buses collect as 2, 4, 5, 7, 9; the 8 sits alone.
        let mut with_isolated = case;
        with_isolated.buses.push(Bus { id: 8, voltage_class: None });
        let islands = ac_islands(&with_isolated);
        let ids: Vec<Vec<u32>> = islands
            .iter()
            .map(|isl| isl.iter().map(|&i| with_isolated.buses[i].id).collect())
            .collect();
        assert_eq!(ids, vec![vec![2, 7, 9], vec![4, 5], vec![8]]);
        assert_eq!(islands.len(), ac_components(&with_isolated));
    }

    proptest! {
        /// Any flow of the form p_l = theta_l / x_l satisfies the cycle
        /// equations, and reconstructing angles along the spanning tree
        /// reproduces a consistent assignment on every chord.
        #[test]
        fn kvl_flows_reconstruct_angles(
            n_extra in 0usize..4,
            seed_edges in proptest::collection::vec((1u32..8, 1u32..8), 4..10),
            thetas in proptest::collection::vec(-1.0f64..1.0, 8),
            xs in proptest::collection::vec(0.05f64..1.0, 16),
        ) {
            // Build a connected-ish multigraph: a path backbone plus random
            // extra edges (self-loops filtered out).
            let mut edges: Vec<(u32, u32)> = (1..7).map(|i| (i, i + 1)).collect();
            for &(a, b) in seed_edges.iter().take(4 + n_extra) {
                if a != b {
                    edges.push((a, b));
                }
            }
            let mut case = grid(&edges);
            for (i, br) in case.ac_branches.iter_mut().enumerate() {
                br.x = xs[i % xs.len()];
            }
            let idx = case.bus_index();
            let theta_of = |bus: u32| thetas[(bus as usize - 1) % thetas.len()];
            let flows: Vec<f64> = case
                .ac_branches
                .iter()
                .map(|br| (theta_of(br.from_bus) - theta_of(br.to_bus)) / br.x)
                .collect();

            let basis = build_cycle_basis(&case);
            let n_components = ac_components(&case);
            prop_assert_eq!(
                basis.cycles.len(),
                case.ac_branches.len() + n_components - case.buses.len()
            );
            for cycle in &basis.cycles {
                let sum: f64 = cycle
                    .iter()
                    .map(|&(l, s)| s as f64 * case.ac_branches[l].x * flows[l])
                    .sum();
                prop_assert!(sum.abs() < 1e-9, "cycle voltage sum {} should vanish", sum);
            }

            // Reconstruct angles along the tree implied by flows, then check
            // every branch (chords included) against the reconstruction.
            let k = build_incidence(&case);
            let mut rebuilt = vec![f64::NAN; case.buses.len()];
            let incident = k.incident();
            for root in 0..case.buses.len() {
                if !rebuilt[root].is_nan() {
                    continue;
                }
                rebuilt[root] = theta_of(case.buses[root].id);
                let mut stack = vec![root];
                while let Some(bus) = stack.pop() {
                    for &(l, sign) in &incident[bus] {
                        let (from, to) = k.columns[l];
                        let other = if sign == 1 { to } else { from };
                        if rebuilt[other].is_nan() {
                            // theta_from - theta_to = x * p along the branch.
                            let drop = case.ac_branches[l].x * flows[l];
                            rebuilt[other] = if sign == 1 {
                                rebuilt[bus] - drop
                            } else {
                                rebuilt[bus] + drop
                            };
                            stack.push(other);
                        }
                    }
                }
            }
            for (l, br) in case.ac_branches.iter().enumerate() {
                let diff = rebuilt[idx[&br.from_bus]] - rebuilt[idx[&br.to_bus]];
                prop_assert!((flows[l] - diff / br.x).abs() < 1e-9);
            }
        }
    }
}
