//! Instrumentation counters backing the sublinearity claims.
//!
//! Ops with contracted costs take `&mut Counters` so tests can assert exact
//! touch counts instead of trusting wall-clock noise.

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Counters {
    /// Column reads performed by per-node decodes (r per `unsketch_node`).
    pub decode_column_reads: u64,
    /// Whole-node decodes (`unsketch_node` calls).
    pub decodes: u64,
    /// (c/2) x d matrix-vector products performed by SimHash evaluations.
    pub simhash_matvecs: u64,
    /// Individual sketch entries touched by incremental rehash edits.
    pub rehash_entry_touches: u64,
    /// Nodes moved between buckets by rehash operations.
    pub rehash_nodes_moved: u64,
    /// Bucket membership lookups in LSH directories.
    pub bucket_lookups: u64,
    /// Multiply-accumulate count of GAT convolution estimation.
    pub gat_estimate_flops: u64,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Folds another counter set into this one (e.g. from a scoped closure).
    pub fn absorb(&mut self, other: &Counters) {
        self.decode_column_reads += other.decode_column_reads;
        self.decodes += other.decodes;
        self.simhash_matvecs += other.simhash_matvecs;
        self.rehash_entry_touches += other.rehash_entry_touches;
        self.rehash_nodes_moved += other.rehash_nodes_moved;
        self.bucket_lookups += other.bucket_lookups;
        self.gat_estimate_flops += other.gat_estimate_flops;
    }
}
