//! Operand-shape recording for the online posterior path.
//!
//! Online solves push the shape of every matrix they touch into an
//! [`OpTrace`]. Tests use it to check that the reduced path never works on a
//! `d × d` operand.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TracedOp {
    pub label: &'static str,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Default, Clone)]
pub struct OpTrace {
    enabled: bool,
    ops: Vec<TracedOp>,
}

impl OpTrace {
    pub fn recording() -> Self {
        OpTrace {
            enabled: true,
            ops: Vec::new(),
        }
    }

    pub fn disabled() -> Self {
        OpTrace::default()
    }

    pub fn record(&mut self, label: &'static str, rows: usize, cols: usize) {
        if self.enabled {
            self.ops.push(TracedOp { label, rows, cols });
        }
    }

    pub fn ops(&self) -> &[TracedOp] {
        &self.ops
    }

    pub fn count(&self) -> usize {
        self.ops.len()
    }

    /// Number of recorded operations whose operand is at least `d × d`.
    pub fn square_ops_of_dim(&self, d: usize) -> usize {
        self.ops.iter().filter(|op| op.rows >= d && op.cols >= d).count()
    }

    /// Largest element count of any recorded operand.
    pub fn max_operand_len(&self) -> usize {
        self.ops.iter().map(|op| op.rows * op.cols).max().unwrap_or(0)
    }
}
