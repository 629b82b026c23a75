use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::random_tree::random_parents;
use super::taxonomy::Taxonomy;
use super::AnnotatedSentence;
use crate::error::{Error, Result};
use crate::objective::Structure;

/// Gold depths and pairwise distances for one sentence under one structure.
/// `None` entries are masked out of every loss and metric.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldLabels {
    pub structure: Structure,
    n: usize,
    depths: Vec<Option<f64>>,
    distances: Vec<Option<f64>>,
}

impl GoldLabels {
    pub fn new(
        structure: Structure,
        depths: Vec<Option<f64>>,
        distances: Vec<Option<f64>>,
    ) -> Self {
        let n = depths.len();
        assert_eq!(distances.len(), n * n, "distance matrix must be n x n");
        GoldLabels {
            structure,
            n,
            depths,
            distances,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn depth(&self, i: usize) -> Option<f64> {
        self.depths[i]
    }

    pub fn distance(&self, i: usize, j: usize) -> Option<f64> {
        self.distances[i * self.n + j]
    }

    pub fn depths(&self) -> &[Option<f64>] {
        &self.depths
    }

    /// Number of unmasked unordered pairs `i < j`.
    pub fn unmasked_pairs(&self) -> usize {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.distance(i, j).is_some())
            .count()
    }

    pub fn unmasked_depths(&self) -> usize {
        self.depths.iter().filter(|d| d.is_some()).count()
    }

    /// Applies a token permutation: new token `k` is old token `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> GoldLabels {
        let n = self.n;
        let depths = perm.iter().map(|&p| self.depths[p]).collect();
        let mut distances = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                distances[i * n + j] = self.distance(perm[i], perm[j]);
            }
        }
        GoldLabels::new(self.structure, depths, distances)
    }
}

/// Depth and path-length labels of the rooted tree given by `parents`.
pub fn tree_labels(structure: Structure, parents: &[Option<usize>]) -> GoldLabels {
    let n = parents.len();
    let mut depth = vec![usize::MAX; n];
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = start;
        while depth[cur] == usize::MAX {
            path.push(cur);
            match parents[cur] {
                Some(p) => cur = p,
                None => {
                    depth[cur] = 0;
                    path.pop();
                    break;
                }
            }
        }
        let mut d = depth[cur];
        while let Some(node) = path.pop() {
            d += 1;
            depth[node] = d;
        }
    }
    let lca_distance = |a: usize, b: usize| {
        let (mut x, mut y) = (a, b);
        while depth[x] > depth[y] {
            x = parents[x].unwrap();
        }
        while depth[y] > depth[x] {
            y = parents[y].unwrap();
        }
        while x != y {
            x = parents[x].unwrap();
            y = parents[y].unwrap();
        }
        depth[a] + depth[b] - 2 * depth[x]
    };
    let mut distances = vec![Some(0.0); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = Some(lca_distance(i, j) as f64);
            distances[i * n + j] = d;
            distances[j * n + i] = d;
        }
    }
    GoldLabels::new(
        structure,
        depth.into_iter().map(|d| Some(d as f64)).collect(),
        distances,
    )
}

/// Dependency-tree depths (root 0) and undirected path lengths.
pub fn dep_labels(s: &AnnotatedSentence) -> GoldLabels {
    tree_labels(Structure::Dep, &s.parents())
}

/// Sentence index as depth, index difference as distance.
pub fn positional_labels(n: usize) -> GoldLabels {
    let depths = (0..n).map(|i| Some(i as f64)).collect();
    let mut distances = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            distances.push(Some(i.abs_diff(j) as f64));
        }
    }
    GoldLabels::new(Structure::Pos, depths, distances)
}

/// Labels of a uniformly random labeled tree, fixed by `(n, sentence_seed)`.
pub fn random_tree_labels(n: usize, sentence_seed: u64) -> GoldLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(sentence_seed);
    tree_labels(Structure::Rand, &random_parents(n, &mut rng))
}

/// Per-sentence seed from the global seed and a stable hash of the sentence id.
pub fn sentence_seed(global_seed: u64, sentence_id: &str) -> u64 {
    // FNV-1a, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sentence_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = global_seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const NOUN: &str = "NOUN";
const VERB: &str = "VERB";

/// Hypernymy labels: nouns and verbs resolved through the lexicon; distances
/// only between same-category pairs sharing a taxonomy root.
pub fn hypernymy_labels(s: &AnnotatedSentence, t: &Taxonomy) -> GoldLabels {
    let n = s.len();
    let nodes: Vec<Option<usize>> = s
        .tokens
        .iter()
        .map(|tok| {
            if tok.upos == NOUN || tok.upos == VERB {
                t.lookup(&tok.lemma, &tok.upos)
            } else {
                None
            }
        })
        .collect();
    let depths = nodes.iter().map(|n| n.map(|x| t.depth(x) as f64)).collect();
    let mut distances = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            let (Some(a), Some(b)) = (nodes[i], nodes[j]) else {
                continue;
            };
            if s.tokens[i].upos != s.tokens[j].upos {
                continue;
            }
            distances[i * n + j] = t.distance(a, b).map(|d| d as f64);
        }
    }
    GoldLabels::new(Structure::Lex, depths, distances)
}

/// Labels of `structure` for a sentence.
pub fn labels_for(
    structure: Structure,
    s: &AnnotatedSentence,
    taxonomy: Option<&Taxonomy>,
    global_seed: u64,
) -> Result<GoldLabels> {
    Ok(match structure {
        Structure::Dep => dep_labels(s),
        Structure::Pos => positional_labels(s.len()),
        Structure::Rand => random_tree_labels(s.len(), sentence_seed(global_seed, &s.id)),
        Structure::Lex => {
            let t = taxonomy.ok_or_else(|| {
                Error::Config("LEX objectives require a taxonomy".into())
            })?;
            hypernymy_labels(s, t)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::random_tree::orient;
    use crate::treebank::Token;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::{HashMap, VecDeque};

    fn sentence(heads: &[usize], upos: &[&str], lemmas: &[&str]) -> AnnotatedSentence {
        let tokens = heads
            .iter()
            .enumerate()
            .map(|(i, &h)| Token {
                index: i + 1,
                form: lemmas[i].to_string(),
                lemma: lemmas[i].to_string(),
                upos: upos[i].to_string(),
                head: h,
            })
            .collect();
        AnnotatedSentence::new("t", tokens).unwrap()
    }

    /// Breadth-first path lengths on the undirected tree.
    fn bfs_distances(parents: &[Option<usize>]) -> Vec<Vec<usize>> {
        let n = parents.len();
        let mut adj = vec![Vec::new(); n];
        for (c, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                adj[c].push(p);
                adj[p].push(c);
            }
        }
        (0..n)
            .map(|src| {
                let mut dist = vec![usize::MAX; n];
                dist[src] = 0;
                let mut q = VecDeque::from([src]);
                while let Some(u) = q.pop_front() {
                    for &w in &adj[u] {
                        if dist[w] == usize::MAX {
                            dist[w] = dist[u] + 1;
                            q.push_back(w);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    #[test]
    fn chain_and_star() {
        // a <- b <- c with a as root.
        let chain = sentence(&[0, 1, 2], &["X"; 3], &["a", "b", "c"]);
        let l = dep_labels(&chain);
        assert_eq!(l.depths(), &[Some(0.0), Some(1.0), Some(2.0)]);
        assert_eq!(l.distance(0, 2), Some(2.0));

        let star = sentence(&[0, 1, 1, 1], &["X"; 4], &["r", "a", "b", "c"]);
        let l = dep_labels(&star);
        for i in 1..4 {
            for j in 1..4 {
                if i != j {
                    assert_eq!(l.distance(i, j), Some(2.0));
                }
            }
        }
    }

    #[test]
    fn lca_distances_match_bfs_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let parents = random_parents(10, &mut rng);
            let labels = tree_labels(Structure::Dep, &parents);
            let bfs = bfs_distances(&parents);
            for i in 0..10 {
                for j in 0..10 {
                    assert_eq!(labels.distance(i, j), Some(bfs[i][j] as f64));
                }
            }
        }
    }

    #[test]
    fn positional_examples() {
        assert_eq!(positional_labels(1).depths(), &[Some(0.0)]);
        assert_eq!(positional_labels(4).distance(0, 3), Some(3.0));
        for n in 1..15 {
            let chain: Vec<Option<usize>> =
                (0..n).map(|i| if i == 0 { None } else { Some(i - 1) }).collect();
            let mut expected = tree_labels(Structure::Pos, &chain);
            expected.structure = Structure::Pos;
            assert_eq!(positional_labels(n), expected);
        }
    }

    #[test]
    fn random_tree_examples() {
        assert_eq!(random_tree_labels(1, 9).depths(), &[Some(0.0)]);
        for seed in 0..50 {
            assert_eq!(random_tree_labels(2, seed).distance(0, 1), Some(1.0));
        }
        assert_eq!(random_tree_labels(12, 77), random_tree_labels(12, 77));
    }

    #[test]
    fn random_trees_on_three_nodes_are_uniform() {
        // Three labeled trees on 3 nodes, identified by their center.
        let mut counts = [0usize; 3];
        let draws = 30_000;
        for seed in 0..draws {
            let l = random_tree_labels(3, sentence_seed(seed, "x"));
            let center = (0..3)
                .find(|&c| (0..3).all(|o| l.distance(c, o).unwrap() <= 1.0))
                .unwrap();
            counts[center] += 1;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "{:?}", counts);
        }
    }

    #[test]
    fn sentence_seed_is_stable() {
        // Frozen values guard reproducibility across releases.
        assert_eq!(sentence_seed(0, "a"), sentence_seed(0, "a"));
        assert_ne!(sentence_seed(0, "a"), sentence_seed(0, "b"));
        assert_ne!(sentence_seed(0, "a"), sentence_seed(1, "a"));
    }

    #[test]
    fn hypernymy_examples() {
        let t = Taxonomy::from_parts(
            &[("dog", "animal"), ("cat", "animal"), ("run", "move")],
            &[("dog", NOUN, "dog"), ("cat", NOUN, "cat"), ("run", VERB, "run")],
        )
        .unwrap();
        let s = sentence(&[2, 0, 2], &[NOUN, VERB, NOUN], &["dog", "chase", "cat"]);
        let l = hypernymy_labels(&s, &t);
        assert_eq!(l.distance(0, 2), Some(2.0));
        assert_eq!(l.depth(0), Some(1.0));
        assert_eq!(l.depth(1), None); // unresolvable verb
        assert_eq!(l.unmasked_pairs(), 1);

        let mixed = sentence(&[2, 0], &[NOUN, VERB], &["dog", "run"]);
        let l = hypernymy_labels(&mixed, &t);
        assert_eq!(l.unmasked_pairs(), 0);
        assert_eq!(l.unmasked_depths(), 2);
    }

    /// Random forest over 20 nodes with a lexicon covering every node as a noun
    /// and every other node as a verb too.
    fn random_taxonomy(rng: &mut ChaCha8Rng) -> (Taxonomy, Vec<Option<usize>>) {
        let n = 20;
        let mut parents: Vec<Option<usize>> = vec![None; n];
        for (i, p) in parents.iter_mut().enumerate().skip(1) {
            if rng.random_bool(0.85) {
                *p = Some(rng.random_range(0..i));
            }
        }
        let names: Vec<String> = (0..n).map(|i| format!("n{}", i)).collect();
        let edges: Vec<(&str, &str)> = parents
            .iter()
            .enumerate()
            .map(|(c, p)| (names[c].as_str(), names[p.unwrap_or(c)].as_str()))
            .collect();
        let lex: Vec<(&str, &str, &str)> = names
            .iter()
            .map(|s| (s.as_str(), NOUN, s.as_str()))
            .chain(names.iter().step_by(2).map(|s| (s.as_str(), VERB, s.as_str())))
            .collect();
        (Taxonomy::from_parts(&edges, &lex).unwrap(), parents)
    }

    #[test]
    fn hypernymy_lca_matches_bfs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let (t, parents) = random_taxonomy(&mut rng);
            let bfs = bfs_distances(&parents);
            let len = 12;
            let upos: Vec<&str> = (0..len)
                .map(|_| [NOUN, VERB, "ADJ"][rng.random_range(0..3)])
                .collect();
            let lemmas: Vec<String> = (0..len)
                .map(|_| format!("n{}", rng.random_range(0..20)))
                .collect();
            let lemma_refs: Vec<&str> = lemmas.iter().map(|s| s.as_str()).collect();
            let heads: Vec<usize> = (0..len).collect(); // chain rooted at token 1
            let s = sentence(&heads, &upos, &lemma_refs);
            let l = hypernymy_labels(&s, &t);

            let node = |i: usize| -> Option<usize> {
                t.lookup(&lemmas[i], upos[i])
                    .map(|x| t.name(x)[1..].parse().unwrap())
            };
            let mut resolvable: HashMap<&str, usize> = HashMap::new();
            for i in 0..len {
                if node(i).is_some() && (upos[i] == NOUN || upos[i] == VERB) {
                    *resolvable.entry(upos[i]).or_default() += 1;
                }
                for j in 0..len {
                    let expected = match (node(i), node(j)) {
                        (Some(a), Some(b)) if upos[i] == upos[j] && bfs[a][b] != usize::MAX => {
                            Some(bfs[a][b] as f64)
                        }
                        _ => None,
                    };
                    assert_eq!(l.distance(i, j), expected);
                }
            }
            let shared_roots = resolvable.values().map(|&k| k * k.saturating_sub(1) / 2).sum::<usize>();
            assert!(l.unmasked_pairs() <= shared_roots);
        }
    }

    #[test]
    fn labels_for_requires_taxonomy_for_lex() {
        let s = sentence(&[0], &[NOUN], &["dog"]);
        assert!(labels_for(Structure::Lex, &s, None, 0).is_err());
        assert_eq!(labels_for(Structure::Pos, &s, None, 0).unwrap(), positional_labels(1));
    }

    proptest! {
        #[test]
        fn tree_labels_form_tree_metric(seed in any::<u64>(), n in 1usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parents = random_parents(n, &mut rng);
            let l = tree_labels(Structure::Rand, &parents);
            let root = parents.iter().position(|p| p.is_none()).unwrap();
            prop_assert_eq!(l.depth(root), Some(0.0));
            for (c, p) in parents.iter().enumerate() {
                if let Some(p) = *p {
                    prop_assert_eq!(l.depth(c).unwrap(), l.depth(p).unwrap() + 1.0);
                }
            }
            for _ in 0..30 {
                let (x, y, z) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n));
                let dxz = l.distance(x, z).unwrap();
                let dxy = l.distance(x, y).unwrap();
                let dyz = l.distance(y, z).unwrap();
                prop_assert!(dxz <= dxy + dyz);
                prop_assert_eq!(l.distance(x, y), l.distance(y, x));
                let (di, dj) = (l.depth(x).unwrap(), l.depth(y).unwrap());
                prop_assert!((di - dj).abs() <= dxy && dxy <= di + dj);
            }
            // Equality when y lies on the x-z path: take y as any ancestor of x below the LCA.
            let x = rng.random_range(0..n);
            let mut y = x;
            while let Some(p) = parents[y] {
                y = p;
                let z = root;
                prop_assert_eq!(l.distance(x, z).unwrap(), l.distance(x, y).unwrap() + l.distance(y, z).unwrap());
            }
        }

        #[test]
        fn orient_preserves_edge_set(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parents = random_parents(n, &mut rng);
            let edges: Vec<(usize, usize)> = parents.iter().enumerate()
                .filter_map(|(c, p)| p.map(|p| (c, p))).collect();
            let re = orient(n, &edges, 0);
            prop_assert_eq!(tree_labels(Structure::Rand, &re).distance(0, n - 1),
                            tree_labels(Structure::Rand, &parents).distance(0, n - 1));
        }
    }
}
