//! Per-layer token embeddings: the OPEMB file format and planted synthetic data.
//!
//! OPEMB layout, little-endian:
//!
//! ```text
//! magic   "OPEMB\0"            6 bytes
//! version u8 = 1
//! layer   u32
//! count   u32                  number of sentences
//! dim     u32
//! per sentence:
//!   tokens u32
//!   tokens × dim f32, row-major
//! ```

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::random_orthogonal;
use crate::matrix::Matrix;
use crate::objective::Structure;
use crate::treebank::{random_parents, sentence_seed, AnnotatedSentence};

pub const MAGIC: &[u8; 6] = b"OPEMB\0";
pub const VERSION: u8 = 1;

/// Token embeddings of one layer, one `tokens × dim` matrix per sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub layer: u32,
    pub dim: usize,
    pub sentences: Vec<Matrix>,
}

impl EmbeddingSet {
    pub fn new(layer: u32, dim: usize, sentences: Vec<Matrix>) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            if s.cols() != dim {
                return Err(Error::InvalidArgument(format!(
                    "sentence {} has {} columns, expected {}",
                    i,
                    s.cols(),
                    dim
                )));
            }
        }
        Ok(EmbeddingSet {
            layer,
            dim,
            sentences,
        })
    }

    /// Checks sentence and token counts against a treebank.
    pub fn check_alignment(&self, treebank: &[AnnotatedSentence]) -> Result<()> {
        if self.sentences.len() != treebank.len() {
            return Err(Error::Alignment {
                sentence: "<all>".into(),
                reason: format!(
                    "{} embedded sentences but {} treebank sentences",
                    self.sentences.len(),
                    treebank.len()
                ),
            });
        }
        for (m, s) in self.sentences.iter().zip(treebank) {
            if m.rows() != s.len() {
                return Err(Error::Alignment {
                    sentence: s.id.clone(),
                    reason: format!("{} embedded tokens but {} treebank tokens", m.rows(), s.len()),
                });
            }
        }
        Ok(())
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: start + filled as u64,
                        reason: format!("truncated while reading {}", what),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Reads an OPEMB stream. When `expected` is given the sentence and token
/// counts must match it exactly.
pub fn read_embeddings<R: Read>(
    reader: R,
    expected: Option<&[AnnotatedSentence]>,
) -> Result<EmbeddingSet> {
    let mut r = CountingReader {
        inner: reader,
        offset: 0,
    };
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {:02x?}", magic),
        });
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version, "version")?;
    if version[0] != VERSION {
        return Err(Error::Format {
            offset: 6,
            reason: format!("unsupported version {}", version[0]),
        });
    }
    let layer = r.u32("layer index")?;
    let count = r.u32("sentence count")? as usize;
    let dim = r.u32("dim")? as usize;
    if let Some(tb) = expected {
        if tb.len() != count {
            return Err(Error::Alignment {
                sentence: "<all>".into(),
                reason: format!("{} embedded sentences but {} treebank sentences", count, tb.len()),
            });
        }
    }
    let mut sentences = Vec::with_capacity(count.min(1 << 20));
    let mut buf = Vec::new();
    for s in 0..count {
        let tokens_offset = r.offset;
        let tokens = r.u32("token count")? as usize;
        if let Some(tb) = expected {
            if tb[s].len() != tokens {
                return Err(Error::Alignment {
                    sentence: tb[s].id.clone(),
                    reason: format!(
                        "{} embedded tokens at byte {} but {} treebank tokens",
                        tokens,
                        tokens_offset,
                        tb[s].len()
                    ),
                });
            }
        }
        buf.resize(tokens * dim * 4, 0);
        r.read_exact(&mut buf, "embedding values")?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        sentences.push(Matrix::from_vec(tokens, dim, data)?);
    }
    Ok(EmbeddingSet {
        layer,
        dim,
        sentences,
    })
}

/// Writes an OPEMB stream; values are narrowed to single precision.
pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut w: W) -> Result<()> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{} {} exceeds u32", what, v)))
    };
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&set.layer.to_le_bytes())?;
    w.write_all(&to_u32(set.sentences.len(), "sentence count")?.to_le_bytes())?;
    w.write_all(&to_u32(set.dim, "dim")?.to_le_bytes())?;
    let mut buf = Vec::new();
    for m in &set.sentences {
        buf.clear();
        buf.extend_from_slice(&to_u32(m.rows(), "token count")?.to_le_bytes());
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Recipe for synthetic embeddings with known tree structures planted in
/// disjoint coordinate blocks under a hidden rotation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub ambient_dim: usize,
    /// Structures to plant, each in its own block of coordinates. Only
    /// tree-shaped structures (DEP, POS, RAND) can be planted.
    pub planted_structures: Vec<Structure>,
    /// Width of every planted block. Defaults to the longest sentence minus one.
    #[serde(default)]
    pub block_dim: Option<usize>,
    pub noise_scale: f64,
    pub rotation_seed: u64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Global seed for RAND trees, matching the seed used for RAND labels.
    #[serde(default)]
    pub label_seed: u64,
}

/// Synthesized embeddings plus the hidden ground truth.
#[derive(Clone, Debug)]
pub struct PlantedEmbeddings {
    pub set: EmbeddingSet,
    /// Embeddings are `rotation · x` for the unrotated vectors `x`.
    pub rotation: Matrix,
    /// Coordinate block (before rotation) of each planted structure.
    pub blocks: Vec<(Structure, Range<usize>)>,
}

impl PlantedEmbeddings {
    /// Coordinates, before rotation, carrying `structure`.
    pub fn block(&self, structure: Structure) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|(s, _)| *s == structure)
            .map(|(_, r)| r.clone())
    }

    /// Scaling vector that reads `structure` back out when combined with
    /// `V = rotation`: 1 on the planted block, 0 elsewhere.
    pub fn oracle_scaling(&self, structure: Structure) -> Option<Vec<f64>> {
        let block = self.block(structure)?;
        Some(
            (0..self.set.dim)
                .map(|k| if block.contains(&k) { 1.0 } else { 0.0 })
                .collect(),
        )
    }
}

/// Parent array that `structure` induces on a sentence.
pub fn structure_parents(
    structure: Structure,
    s: &AnnotatedSentence,
    label_seed: u64,
) -> Result<Vec<Option<usize>>> {
    Ok(match structure {
        Structure::Dep => s.parents(),
        Structure::Pos => (0..s.len()).map(|i| i.checked_sub(1)).collect(),
        Structure::Rand => {
            let mut rng = ChaCha8Rng::seed_from_u64(sentence_seed(label_seed, &s.id));
            random_parents(s.len(), &mut rng)
        }
        Structure::Lex => {
            return Err(Error::InvalidArgument(
                "hypernymy structure cannot be planted".into(),
            ))
        }
    })
}

/// Builds planted embeddings for `treebank`.
///
/// Within a block, token `i` carries the 0/1 indicator of the edges on its
/// path to the root, so squared distances equal tree distances and squared
/// norms equal depths. Coordinates outside every block are Gaussian noise.
pub fn synthesize_planted(
    treebank: &[AnnotatedSentence],
    spec: &PlantedSpec,
) -> Result<PlantedEmbeddings> {
    let max_len = treebank.iter().map(|s| s.len()).max().unwrap_or(1);
    let needed = max_len.saturating_sub(1).max(1);
    let block_dim = spec.block_dim.unwrap_or(needed);
    if block_dim < needed {
        return Err(Error::InvalidArgument(format!(
            "planted block of {} coordinates cannot hold sentences of {} tokens",
            block_dim, max_len
        )));
    }
    let planted = block_dim * spec.planted_structures.len();
    if planted > spec.ambient_dim {
        return Err(Error::InvalidArgument(format!(
            "planted rank {} exceeds ambient dim {}",
            planted, spec.ambient_dim
        )));
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        return Err(Error::InvalidArgument("noise_scale must be finite and >= 0".into()));
    }
    let blocks: Vec<(Structure, Range<usize>)> = spec
        .planted_structures
        .iter()
        .enumerate()
        .map(|(b, &s)| (s, b * block_dim..(b + 1) * block_dim))
        .collect();

    let dim = spec.ambient_dim;
    let rotation = random_orthogonal(dim, spec.rotation_seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut sentences = Vec::with_capacity(treebank.len());
    for s in treebank {
        let n = s.len();
        let mut x = Matrix::zeros(n, dim);
        for (structure, block) in &blocks {
            let parents = structure_parents(*structure, s, spec.label_seed)?;
            let root = parents.iter().position(|p| p.is_none()).expect("tree has a root");
            let edge_coord = |child: usize| block.start + if child < root { child } else { child - 1 };
            for i in 0..n {
                let mut cur = i;
                while let Some(p) = parents[cur] {
                    x[(i, edge_coord(cur))] = 1.0;
                    cur = p;
                }
            }
        }
        for i in 0..n {
            for k in planted..dim {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                x[(i, k)] = z * spec.noise_scale;
            }
        }
        // Row-vector form of h = Q x.
        sentences.push(x.matmul(&rotation.transpose())?);
    }
    Ok(PlantedEmbeddings {
        set: EmbeddingSet::new(0, dim, sentences)?,
        rotation,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{tree_labels, Token};
    use proptest::prelude::*;

    fn chain(n: usize, id: &str) -> AnnotatedSentence {
        let tokens = (0..n)
            .map(|i| Token {
                index: i + 1,
                form: "w".into(),
                lemma: "w".into(),
                upos: "X".into(),
                head: i,
            })
            .collect();
        AnnotatedSentence::new(id, tokens).unwrap()
    }

    fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn spec(dim: usize, noise: f64) -> PlantedSpec {
        PlantedSpec {
            ambient_dim: dim,
            planted_structures: vec![Structure::Dep],
            block_dim: None,
            noise_scale: noise,
            rotation_seed: 3,
            noise_seed: 4,
            label_seed: 5,
        }
    }

    #[test]
    fn round_trip_is_value_identical() {
        let tb = vec![chain(3, "a"), chain(5, "b")];
        let p = synthesize_planted(&tb, &spec(6, 0.3)).unwrap();
        let mut bytes = Vec::new();
        write_embeddings(&p.set, &mut bytes).unwrap();
        let back = read_embeddings(bytes.as_slice(), Some(&tb)).unwrap();
        let mut again = Vec::new();
        write_embeddings(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(bytes.len(), 6 + 1 + 12 + (4 + 3 * 6 * 4) + (4 + 5 * 6 * 4));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let tb = vec![chain(2, "a")];
        let p = synthesize_planted(&tb, &spec(2, 0.0)).unwrap();
        let mut bytes = Vec::new();
        write_embeddings(&p.set, &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_embeddings(bad.as_slice(), None), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[6] = 2;
        assert!(matches!(read_embeddings(bad.as_slice(), None), Err(Error::Format { offset: 6, .. })));

        let cut = &bytes[..bytes.len() - 3];
        match read_embeddings(cut, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn token_count_mismatch_names_sentence() {
        let tb = vec![chain(2, "a"), chain(3, "b")];
        let p = synthesize_planted(&tb, &spec(4, 0.0)).unwrap();
        let mut bytes = Vec::new();
        write_embeddings(&p.set, &mut bytes).unwrap();
        let other = vec![chain(2, "a"), chain(4, "zz")];
        match read_embeddings(bytes.as_slice(), Some(&other)) {
            Err(Error::Alignment { sentence, .. }) => assert_eq!(sentence, "zz"),
            r => panic!("{:?}", r),
        }
        assert!(matches!(
            read_embeddings(bytes.as_slice(), Some(&other[..1])),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn planted_chain_distances() {
        let tb = vec![chain(3, "c")];
        let p = synthesize_planted(&tb, &spec(5, 0.0)).unwrap();
        let h = &p.set.sentences[0];
        let expected = [[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((sq_dist(h.row(i), h.row(j)) - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_overflow_is_rejected() {
        let tb = vec![chain(6, "c")];
        assert!(synthesize_planted(&tb, &spec(4, 0.0)).is_err());
        let mut two = spec(8, 0.0);
        two.planted_structures = vec![Structure::Dep, Structure::Pos];
        assert!(synthesize_planted(&tb, &two).is_err());
        let mut lex = spec(8, 0.0);
        lex.planted_structures = vec![Structure::Lex];
        assert!(synthesize_planted(&tb, &lex).is_err());
    }

    #[test]
    fn same_seed_same_embeddings() {
        let tb = vec![chain(4, "a"), chain(7, "b")];
        let a = synthesize_planted(&tb, &spec(10, 0.5)).unwrap();
        let b = synthesize_planted(&tb, &spec(10, 0.5)).unwrap();
        assert_eq!(a.set, b.set);
    }

    proptest! {
        #[test]
        fn planted_norms_and_distances_match_tree(seed in any::<u64>(), n in 2usize..14) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parents = random_parents(n, &mut rng);
            let tokens = parents.iter().enumerate().map(|(i, p)| Token {
                index: i + 1, form: "w".into(), lemma: "w".into(), upos: "X".into(),
                head: p.map_or(0, |p| p + 1),
            }).collect();
            let s = AnnotatedSentence::new("p", tokens).unwrap();
            let mut sp = spec(n + 3, 0.0);
            sp.rotation_seed = seed;
            let p = synthesize_planted(std::slice::from_ref(&s), &sp).unwrap();
            let labels = tree_labels(Structure::Dep, &parents);
            let h = &p.set.sentences[0];
            let zero = vec![0.0; n + 3];
            for i in 0..n {
                prop_assert!((sq_dist(h.row(i), &zero) - labels.depth(i).unwrap()).abs() < 1e-9);
                for j in 0..n {
                    prop_assert!((sq_dist(h.row(i), h.row(j)) - labels.distance(i, j).unwrap()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn file_round_trip_random_payload(rows in proptest::collection::vec(1usize..6, 0..5), dim in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sentences = rows.iter().map(|&r| {
                let data = (0..r * dim).map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * 10.0) as f32 as f64
                }).collect();
                Matrix::from_vec(r, dim, data).unwrap()
            }).collect();
            let set = EmbeddingSet::new(7, dim, sentences).unwrap();
            let mut bytes = Vec::new();
            write_embeddings(&set, &mut bytes).unwrap();
            prop_assert_eq!(read_embeddings(bytes.as_slice(), None).unwrap(), set);
        }
    }
}
