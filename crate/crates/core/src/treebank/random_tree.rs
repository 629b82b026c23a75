use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;

/// Decodes a Prüfer sequence over `n = seq.len() + 2` nodes into undirected edges.
pub fn prufer_decode(seq: &[usize]) -> Vec<(usize, usize)> {
    let n = seq.len() + 2;
    let mut degree = vec![1usize; n];
    for &v in seq {
        assert!(v < n, "Prüfer entry {} out of range for {} nodes", v, n);
        degree[v] += 1;
    }
    let mut leaves: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| degree[v] == 1).map(Reverse).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &v in seq {
        let Reverse(leaf) = leaves.pop().expect("a leaf always exists");
        edges.push((leaf, v));
        degree[v] -= 1;
        if degree[v] == 1 {
            leaves.push(Reverse(v));
        }
    }
    let Reverse(a) = leaves.pop().expect("two nodes remain");
    let Reverse(b) = leaves.pop().expect("two nodes remain");
    edges.push((a, b));
    edges
}

/// Parent array of a uniformly random labeled tree on `n` nodes with a
/// uniformly random root. `None` marks the root.
pub fn random_parents<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Option<usize>> {
    assert!(n >= 1);
    if n == 1 {
        return vec![None];
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let edges = prufer_decode(&seq);
    let root = rng.random_range(0..n);
    orient(n, &edges, root)
}

/// Orients an undirected tree away from `root`.
pub(crate) fn orient(n: usize, edges: &[(usize, usize)], root: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent = vec![None; n];
    let mut seen = vec![false; n];
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(u) = stack.pop() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some(u);
                stack.push(w);
            }
        }
    }
    parent
}
