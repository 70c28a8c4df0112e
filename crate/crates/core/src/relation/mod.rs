//! Sentence-level relation scoring and distant-supervision labelling.

pub mod cnn;
pub mod weak;

pub use cnn::{
    distance_row, pair_probability, train_re, CnnConfig, PairEvidence, ReTrainOptions, RelationCnn, SentenceInstance,
};
pub use weak::{
    build_sentence_sets, canonicalize, match_mentions, weak_label, Category, ChartEdge, EntityLexicon, Mention,
    LabeledPair, PairKey, SentenceRef, TrainingChart, WeakLabels,
};
