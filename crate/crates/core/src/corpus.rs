//! Embeddings aligned with the gold labels of every requested structure.

use std::collections::BTreeMap;

use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objective::{ObjectiveId, Structure};
use crate::probe::Example;
use crate::treebank::{labels_for, AnnotatedSentence, GoldLabels, Taxonomy};

#[derive(Clone, Debug)]
pub struct LabeledCorpus {
    pub ids: Vec<String>,
    pub embeddings: Vec<Matrix>,
    pub labels: BTreeMap<Structure, Vec<GoldLabels>>,
    /// Gold dependency parents, `None` at the root.
    pub dep_parents: Vec<Vec<Option<usize>>>,
}

impl LabeledCorpus {
    /// Aligns `embeddings` with `treebank` and derives labels for `structures`.
    /// `label_seed` fixes the random trees.
    pub fn build(
        treebank: &[AnnotatedSentence],
        embeddings: &EmbeddingSet,
        structures: &[Structure],
        taxonomy: Option<&Taxonomy>,
        label_seed: u64,
    ) -> Result<Self> {
        embeddings.check_alignment(treebank)?;
        let mut labels = BTreeMap::new();
        for &structure in structures {
            let per_sentence = treebank
                .iter()
                .map(|s| labels_for(structure, s, taxonomy, label_seed))
                .collect::<Result<Vec<_>>>()?;
            labels.insert(structure, per_sentence);
        }
        Ok(LabeledCorpus {
            ids: treebank.iter().map(|s| s.id.clone()).collect(),
            embeddings: embeddings.sentences.clone(),
            labels,
            dep_parents: treebank.iter().map(|s| s.parents()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, |m| m.cols())
    }

    pub fn labels(&self, structure: Structure) -> Result<&[GoldLabels]> {
        self.labels
            .get(&structure)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("no {} labels in corpus", structure.name())))
    }

    /// Every sentence as an example of `objective`.
    pub fn examples(&self, objective: ObjectiveId) -> Result<Vec<Example<'_>>> {
        let labels = self.labels(objective.structure)?;
        Ok(self
            .embeddings
            .iter()
            .zip(labels)
            .map(|(embeddings, gold)| Example { embeddings, gold })
            .collect())
    }

    /// The sentences at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledCorpus {
        LabeledCorpus {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            embeddings: indices.iter().map(|&i| self.embeddings[i].clone()).collect(),
            labels: self
                .labels
                .iter()
                .map(|(&s, l)| (s, indices.iter().map(|&i| l[i].clone()).collect()))
                .collect(),
            dep_parents: indices.iter().map(|&i| self.dep_parents[i].clone()).collect(),
        }
    }
}
