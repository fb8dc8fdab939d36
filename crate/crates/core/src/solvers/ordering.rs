//! Fill-reducing orderings for sparse symmetric factorization.

use crate::sparse::CsrMatrix;
use std::collections::VecDeque;

const LEAF_SIZE: usize = 96;

/// Adjacency structure of a symmetric sparsity pattern (diagonal dropped).
struct Graph {
    ptr: Vec<usize>,
    adj: Vec<usize>,
}

impl Graph {
    fn from_matrix(a: &CsrMatrix) -> Self {
        let n = a.nrows();
        let mut ptr = Vec::with_capacity(n + 1);
        let mut adj = Vec::with_capacity(a.nnz());
        ptr.push(0);
        for i in 0..n {
            for (j, _) in a.row(i) {
                if j != i {
                    adj.push(j);
                }
            }
            ptr.push(adj.len());
        }
        Self { ptr, adj }
    }

    fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[self.ptr[i]..self.ptr[i + 1]]
    }
}

/// Nested dissection with breadth-first level-set separators. Returns
/// `perm` with `perm[k]` = original index eliminated at step `k`.
pub fn nested_dissection(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let g = Graph::from_matrix(a);
    // `part[i]` identifies the subgraph node `i` currently belongs to
    let mut part = vec![0usize; n];
    let mut next_part = 1;
    let mut level = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();

    // split into connected components first
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut seen = vec![false; n];
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut k = 0;
        while k < comp.len() {
            let u = comp[k];
            k += 1;
            for &v in g.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                }
            }
        }
        comps.push(comp);
    }

    // explicit stack of tasks: either dissect a set or emit a separator
    enum Task {
        Dissect(Vec<usize>),
        Emit(Vec<usize>),
    }
    let mut stack: Vec<Task> = comps.into_iter().rev().map(Task::Dissect).collect();
    while let Some(task) = stack.pop() {
        let nodes = match task {
            Task::Emit(sep) => {
                order.extend(sep);
                continue;
            }
            Task::Dissect(nodes) => nodes,
        };
        if nodes.len() <= LEAF_SIZE {
            order.extend(nodes);
            continue;
        }
        let id = next_part;
        next_part += 1;
        for &u in &nodes {
            part[u] = id;
        }
        let bfs = |start: usize, level: &mut [usize], queue: &mut VecDeque<usize>| -> (Vec<usize>, usize) {
            for &u in &nodes {
                level[u] = usize::MAX;
            }
            let mut visit = Vec::with_capacity(nodes.len());
            level[start] = 0;
            queue.clear();
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                visit.push(u);
                for &v in g.neighbors(u) {
                    if part[v] == id && level[v] == usize::MAX {
                        level[v] = level[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            let depth = level[*visit.last().unwrap()];
            (visit, depth)
        };
        // pseudo-peripheral start node
        let (mut visit, mut depth) = bfs(nodes[0], &mut level, &mut queue);
        for _ in 0..4 {
            let last = *visit.last().unwrap();
            let (v2, d2) = bfs(last, &mut level, &mut queue);
            if d2 <= depth {
                break;
            }
            visit = v2;
            depth = d2;
        }
        if visit.len() < nodes.len() {
            // disconnected remainder: dissect the pieces separately
            let reached: Vec<usize> = visit;
            let rest: Vec<usize> = nodes.iter().copied().filter(|&u| level[u] == usize::MAX).collect();
            stack.push(Task::Dissect(rest));
            stack.push(Task::Dissect(reached));
            continue;
        }
        if depth < 2 {
            order.extend(nodes);
            continue;
        }
        // level whose cumulative count first reaches half of the nodes
        let mut counts = vec![0usize; depth + 1];
        for &u in &visit {
            counts[level[u]] += 1;
        }
        let half = nodes.len() / 2;
        let mut acc = 0;
        let mut sep_level = 1;
        for (l, &c) in counts.iter().enumerate() {
            acc += c;
            if acc >= half {
                sep_level = l.clamp(1, depth - 1);
                break;
            }
        }
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut sep = Vec::new();
        for &u in &visit {
            match level[u].cmp(&sep_level) {
                std::cmp::Ordering::Less => lo.push(u),
                std::cmp::Ordering::Equal => sep.push(u),
                std::cmp::Ordering::Greater => hi.push(u),
            }
        }
        stack.push(Task::Emit(sep));
        stack.push(Task::Dissect(hi));
        stack.push(Task::Dissect(lo));
    }
    debug_assert_eq!(order.len(), n);
    order
}
