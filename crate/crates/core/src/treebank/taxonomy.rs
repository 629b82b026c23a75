use std::collections::HashMap;
use std::io::BufRead;

use crate::error::{Error, Result};

/// A hypernymy forest with a (lemma, UPOS) lexicon.
///
/// File format, one record per line, `#` comments ignored:
///
/// ```text
/// E<TAB>child<TAB>parent
/// L<TAB>lemma<TAB>upos<TAB>node
/// ```
#[derive(Clone, Debug, Default)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    lexicon: HashMap<(String, String), usize>,
}

impl Taxonomy {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.parent.push(None);
        i
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    /// Edge count from `node` up to the root of its tree.
    pub fn depth(&self, node: usize) -> usize {
        self.depth[node]
    }

    pub fn root_of(&self, mut node: usize) -> usize {
        while let Some(p) = self.parent[node] {
            node = p;
        }
        node
    }

    pub fn lookup(&self, lemma: &str, upos: &str) -> Option<usize> {
        self.lexicon
            .get(&(lemma.to_string(), upos.to_string()))
            .copied()
    }

    /// Tree distance through the lowest common ancestor, `None` when the
    /// nodes live in different trees.
    pub fn distance(&self, a: usize, b: usize) -> Option<usize> {
        let (mut x, mut y) = (a, b);
        while self.depth[x] > self.depth[y] {
            x = self.parent[x]?;
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent[y]?;
        }
        while x != y {
            x = self.parent[x]?;
            y = self.parent[y]?;
        }
        Some(self.depth[a] + self.depth[b] - 2 * self.depth[x])
    }

    /// Builds a taxonomy from in-memory edges and lexicon entries.
    pub fn from_parts(
        edges: &[(&str, &str)],
        lexicon: &[(&str, &str, &str)],
    ) -> Result<Taxonomy> {
        let mut t = Taxonomy::default();
        for (line, &(child, parent)) in edges.iter().enumerate() {
            t.add_edge(child, parent, line + 1)?;
        }
        for (line, &(lemma, upos, node)) in lexicon.iter().enumerate() {
            t.add_lexeme(lemma, upos, node, edges.len() + line + 1)?;
        }
        t.finish()?;
        Ok(t)
    }

    fn add_edge(&mut self, child: &str, parent: &str, line: usize) -> Result<()> {
        let c = self.intern(child);
        let p = self.intern(parent);
        if c == p {
            // Self-rooted node.
            return Ok(());
        }
        match self.parent[c] {
            Some(existing) if existing != p => Err(Error::MalformedTaxonomy {
                line,
                reason: format!(
                    "node '{}' has two parents ('{}' and '{}')",
                    child, self.names[existing], parent
                ),
            }),
            _ => {
                self.parent[c] = Some(p);
                Ok(())
            }
        }
    }

    fn add_lexeme(&mut self, lemma: &str, upos: &str, node: &str, line: usize) -> Result<()> {
        let target = self.node(node).ok_or_else(|| Error::MalformedTaxonomy {
            line,
            reason: format!("lexicon entry targets unknown node '{}'", node),
        })?;
        self.lexicon
            .insert((lemma.to_string(), upos.to_string()), target);
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let n = self.names.len();
        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            let mut path = Vec::new();
            let mut cur = start;
            while depth[cur] == usize::MAX {
                if path.len() > n {
                    return Err(Error::MalformedTaxonomy {
                        line: 0,
                        reason: format!("cycle in parent links through '{}'", self.names[start]),
                    });
                }
                path.push(cur);
                match self.parent[cur] {
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
        self.depth = depth;
        Ok(())
    }
}

/// Reads a taxonomy file. Lexicon lines may precede the edges they refer to.
pub fn load_taxonomy<R: BufRead>(reader: R) -> Result<Taxonomy> {
    let mut t = Taxonomy::default();
    let mut pending = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match cols.as_slice() {
            ["E", child, parent] => t.add_edge(child, parent, line_no)?,
            ["L", lemma, upos, node] => {
                pending.push((lemma.to_string(), upos.to_string(), node.to_string(), line_no))
            }
            _ => {
                return Err(Error::MalformedTaxonomy {
                    line: line_no,
                    reason: format!("unrecognized record '{}'", line),
                })
            }
        }
    }
    for (lemma, upos, node, line) in pending {
        t.add_lexeme(&lemma, &upos, &node, line)?;
    }
    t.finish()?;
    Ok(t)
}
