//! Lambda-shaped attention mask.
//!
//! Every query row `i` may attend to two branches of keys:
//!
//! * the global branch `[0, min(n_global, i + 1))`, the starting tokens;
//! * the local branch `[max(0, i + 1 - n_local), i + 1)`, the most recent tokens.
//!
//! Rows are computed on demand from the parameters, so a mask over `n` tokens
//! costs O(1) memory. [`LambdaMask::to_dense`] materializes the boolean matrix
//! for inspection and for tests.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};

/// Default size of the pinned prefix.
pub const DEFAULT_N_GLOBAL: usize = 16;

/// Sizes of the two mask branches and the distance limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskParams {
    pub n_global: usize,
    pub n_local: usize,
    pub l_pretrain: usize,
}

impl MaskParams {
    pub fn new(n_global: usize, n_local: usize, l_pretrain: usize) -> Result<Self> {
        let params = Self {
            n_global,
            n_local,
            l_pretrain,
        };
        params.validate()?;
        Ok(params)
    }

    /// `n_local = l_pretrain` with the default pinned prefix.
    pub fn for_pretrain_length(l_pretrain: usize) -> Result<Self> {
        Self::new(DEFAULT_N_GLOBAL, l_pretrain, l_pretrain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_local == 0 {
            return Err(Error::invalid("n_local must be at least 1"));
        }
        if self.l_pretrain == 0 {
            return Err(Error::invalid("l_pretrain must be at least 1"));
        }
        if self.n_local > self.l_pretrain {
            return Err(Error::invalid(format!(
                "n_local ({}) must not exceed l_pretrain ({})",
                self.n_local, self.l_pretrain
            )));
        }
        Ok(())
    }

    /// Upper bound on the number of keys any row attends to.
    pub fn max_row_len(&self) -> usize {
        self.n_global + self.n_local
    }
}

/// A token distance after the distance limit has been applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EffectiveDistance(pub usize);

impl EffectiveDistance {
    pub fn value(self) -> usize {
        self.0
    }
}

/// Clamped distance between query `i` and key `j`: `min(i - j, l_pretrain)`.
pub fn effective_distance(i: usize, j: usize, params: &MaskParams) -> Result<EffectiveDistance> {
    if j > i {
        return Err(Error::invalid(format!(
            "key index {j} is after query index {i}"
        )));
    }
    Ok(EffectiveDistance((i - j).min(params.l_pretrain)))
}

/// The allowed keys of one query row, as the two (possibly overlapping) branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRow {
    pub global: Range<usize>,
    pub local: Range<usize>,
}

impl MaskRow {
    /// Keys reached only through the global branch, i.e. excluding the overlap
    /// with the local branch.
    pub fn global_only(&self) -> Range<usize> {
        0..self.global.end.min(self.local.start)
    }

    /// Allowed keys in ascending order, each exactly once.
    pub fn keys(&self) -> impl Iterator<Item = usize> {
        self.global_only().chain(self.local.clone())
    }

    pub fn len(&self) -> usize {
        self.global_only().len() + self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, j: usize) -> bool {
        self.global.contains(&j) || self.local.contains(&j)
    }
}

/// Row structure of a Lambda-shaped (or plain causal) attention mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LambdaMask {
    seq_len: usize,
    n_global: usize,
    n_local: usize,
}

/// Builds the Lambda mask over `seq_len` tokens.
///
/// `n_global = 0` is accepted but drops the starting tokens from every row
/// past `n_local`, which is known to degrade generation immediately.
pub fn build_mask(seq_len: usize, params: &MaskParams) -> Result<LambdaMask> {
    if seq_len == 0 {
        return Err(Error::invalid("seq_len must be at least 1"));
    }
    params.validate()?;
    Ok(LambdaMask {
        seq_len,
        n_global: params.n_global,
        n_local: params.n_local,
    })
}

impl LambdaMask {
    /// Full lower-triangular mask.
    pub fn causal(seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::invalid("seq_len must be at least 1"));
        }
        Ok(Self {
            seq_len,
            n_global: 0,
            n_local: seq_len,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, i: usize) -> MaskRow {
        debug_assert!(i < self.seq_len);
        MaskRow {
            global: 0..self.n_global.min(i + 1),
            local: (i + 1).saturating_sub(self.n_local)..i + 1,
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = MaskRow> + '_ {
        (0..self.seq_len).map(|i| self.row(i))
    }

    /// Total number of allowed (query, key) cells.
    pub fn allowed_count(&self) -> usize {
        self.rows().map(|r| r.len()).sum()
    }

    /// Dense boolean matrix, `dense[i][j]` true iff query `i` may attend to key `j`.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        self.rows()
            .map(|row| (0..self.seq_len).map(|j| row.contains(j)).collect())
            .collect()
    }

    /// One line per row: `i: [g0,g1) [l0,l1)`.
    pub fn format_ranges(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.rows().enumerate() {
            let _ = writeln!(
                out,
                "{i}: [{},{}) [{},{})",
                row.global.start, row.global.end, row.local.start, row.local.end
            );
        }
        out
    }

    /// One line of `0`/`1` characters per row.
    pub fn format_dense(&self) -> String {
        let mut out = String::with_capacity(self.seq_len * (self.seq_len + 1));
        for row in self.rows() {
            for j in 0..self.seq_len {
                out.push(if row.contains(j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Fraction of the causal triangle the mask keeps.
pub fn mask_density(mask: &LambdaMask) -> f64 {
    let n = mask.seq_len as f64;
    mask.allowed_count() as f64 / (n * (n + 1.0) / 2.0)
}
