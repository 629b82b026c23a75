//! CoNLL-U ingestion and gold labels for every probed structure.

mod labels;
mod random_tree;
mod taxonomy;

use std::io::{BufRead, Write};

pub use self::labels::{
    dep_labels, hypernymy_labels, labels_for, positional_labels, random_tree_labels, sentence_seed,
    tree_labels, GoldLabels,
};
pub use self::random_tree::{prufer_decode, random_parents};
pub use self::taxonomy::{load_taxonomy, Taxonomy};

use crate::error::{Error, Result};

/// A single token of a dependency-annotated sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    /// 1-based position.
    pub index: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    /// 0 for the root, otherwise the 1-based index of the parent.
    pub head: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl AnnotatedSentence {
    /// Builds a sentence and checks that the heads form a single-rooted tree.
    pub fn new(id: impl Into<String>, tokens: Vec<Token>) -> Result<Self> {
        let s = AnnotatedSentence {
            id: id.into(),
            tokens,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// 0-based index of the root token.
    pub fn root(&self) -> usize {
        self.tokens
            .iter()
            .position(|t| t.head == 0)
            .expect("validated sentence has a root")
    }

    /// 0-based parent of every token, `None` for the root.
    pub fn parents(&self) -> Vec<Option<usize>> {
        self.tokens
            .iter()
            .map(|t| t.head.checked_sub(1))
            .collect()
    }

    fn malformed(&self, reason: String) -> Error {
        Error::MalformedSentence {
            id: self.id.clone(),
            reason,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(self.malformed("no tokens".into()));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.index != i + 1 {
                return Err(self.malformed(format!(
                    "token ids must be consecutive from 1, found {} at position {}",
                    t.index,
                    i + 1
                )));
            }
            if t.head > n {
                return Err(self.malformed(format!(
                    "token {} has out-of-range head {}",
                    t.index, t.head
                )));
            }
            if t.head == t.index {
                return Err(self.malformed(format!("token {} is its own head", t.index)));
            }
        }
        let roots = self.tokens.iter().filter(|t| t.head == 0).count();
        if roots != 1 {
            return Err(self.malformed(format!("expected exactly one root, found {}", roots)));
        }
        // Every token must reach the root within n steps.
        for t in &self.tokens {
            let mut cur = t.head;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(self.malformed(format!(
                        "cycle in head links through token {}",
                        t.index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses CoNLL-U text. Multiword-token ranges and empty nodes are skipped.
pub fn parse_conllu<R: BufRead>(reader: R) -> Result<Vec<AnnotatedSentence>> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut sent_id: Option<String> = None;

    let mut flush = |tokens: &mut Vec<Token>, sent_id: &mut Option<String>| -> Result<()> {
        if tokens.is_empty() && sent_id.is_none() {
            return Ok(());
        }
        let id = sent_id
            .take()
            .unwrap_or_else(|| format!("s{}", sentences.len() + 1));
        sentences.push(AnnotatedSentence::new(id, std::mem::take(tokens))?);
        Ok(())
    };

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut sent_id)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sent_id" {
                    sent_id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let current_id = || {
            sent_id
                .clone()
                .unwrap_or_else(|| format!("line {}", line_no + 1))
        };
        if cols.len() != 10 {
            return Err(Error::MalformedSentence {
                id: current_id(),
                reason: format!(
                    "line {} has {} columns, expected 10",
                    line_no + 1,
                    cols.len()
                ),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let parse_num = |field: &str, what: &str| -> Result<usize> {
            field.parse().map_err(|_| Error::MalformedSentence {
                id: current_id(),
                reason: format!("line {}: bad {} '{}'", line_no + 1, what, field),
            })
        };
        let index = parse_num(cols[0], "token id")?;
        let head = parse_num(cols[6], "head")?;
        tokens.push(Token {
            index,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            head,
        });
    }
    flush(&mut tokens, &mut sent_id)?;
    Ok(sentences)
}

/// Writes sentences as CoNLL-U with `_` in the unused columns.
pub fn write_conllu<W: Write>(sentences: &[AnnotatedSentence], mut w: W) -> Result<()> {
    for s in sentences {
        writeln!(w, "# sent_id = {}", s.id)?;
        for t in &s.tokens {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t_",
                t.index,
                t.form,
                t.lemma,
                t.upos,
                t.head,
                if t.head == 0 { "root" } else { "dep" }
            )?;
        }
        writeln!(w)?;
    }
    Ok(())
}
