//! Access-audited label view.
//!
//! Training-path code (prototype updates, GCD computation, the loss) reads
//! labels only through [`AuditedLabels`], which counts every read by the
//! node's split. A run is leakage-free when the validation and test counters
//! stay at zero.

use super::{Label, Split, SplitAssignment};
use std::cell::Cell;

#[derive(Debug, Default)]
pub struct LabelAudit {
    train: Cell<u64>,
    valid: Cell<u64>,
    test: Cell<u64>,
    unsplit: Cell<u64>,
}

impl LabelAudit {
    pub fn new() -> Self {
        LabelAudit::default()
    }

    fn count(&self, split: Split) {
        let cell = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
            Split::None => &self.unsplit,
        };
        cell.set(cell.get() + 1);
    }

    pub fn train_reads(&self) -> u64 {
        self.train.get()
    }

    pub fn valid_reads(&self) -> u64 {
        self.valid.get()
    }

    pub fn test_reads(&self) -> u64 {
        self.test.get()
    }

    pub fn unsplit_reads(&self) -> u64 {
        self.unsplit.get()
    }
}

/// Labels bundled with the split; every label read is tallied by split.
#[derive(Clone, Copy)]
pub struct AuditedLabels<'a> {
    labels: &'a [Label],
    split: &'a SplitAssignment,
    audit: &'a LabelAudit,
}

impl<'a> AuditedLabels<'a> {
    pub fn new(labels: &'a [Label], split: &'a SplitAssignment, audit: &'a LabelAudit) -> Self {
        assert_eq!(labels.len(), split.len(), "labels and split disagree on node count");
        AuditedLabels { labels, split, audit }
    }

    /// Reads (and tallies) the label of `node`.
    pub fn label(&self, node: usize) -> Label {
        self.audit.count(self.split.get(node));
        self.labels[node]
    }

    /// Split lookup; not a label read, so not tallied.
    pub fn split(&self, node: usize) -> Split {
        self.split.get(node)
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }
}
