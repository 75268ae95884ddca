//! Scaled dot-product attention with a 3D relative position bias.
//!
//! Tokens live on a `(t, h, w)` grid. Every ordered token pair maps to the
//! offset `(Δt, Δh, Δw)` between their grid positions, and the bias matrix
//! is a lookup of that offset in a `(2t−1)(2h−1)(2w−1)` table, so pairs with
//! equal offsets share one weight. The forward pass is
//! `softmax(QKᵀ/√d + B) · V` with row-max subtraction for stability.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::selfcheck::{Check, SelfCheckReport};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("grid extents must be positive, got {0:?}")]
    BadExtents([usize; 3]),
    #[error("position {position:?} outside grid extents {extents:?}")]
    OutOfGrid {
        position: [usize; 3],
        extents: [usize; 3],
    },
    #[error("bias table has {got} entries, extents {extents:?} need {expected}")]
    TableSize {
        extents: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A dense spatio-temporal token grid enumerated row-major (t, then h,
/// then w).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub extents: [usize; 3],
}

impl TokenGrid {
    pub fn new(n_t: usize, n_h: usize, n_w: usize) -> Result<Self, AttentionError> {
        let extents = [n_t, n_h, n_w];
        if extents.contains(&0) {
            return Err(AttentionError::BadExtents(extents));
        }
        Ok(Self { extents })
    }

    pub fn token_count(&self) -> usize {
        self.extents.iter().product()
    }

    /// Grid position of token `i` in enumeration order.
    pub fn position(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.extents;
        [i / (h * w), (i / w) % h, i % w]
    }
}

/// Size of the offset table for a grid: `(2t−1)(2h−1)(2w−1)`.
pub fn table_len(extents: [usize; 3]) -> usize {
    extents.iter().map(|&e| 2 * e - 1).product()
}

/// Index of the offset `pos_i − pos_j` in the bias table: each component is
/// shifted into the non-negative range and the three are flattened in mixed
/// radix. Distinct offsets map to distinct indices; swapping the arguments
/// lands on the negated offset's entry.
pub fn relative_index(
    pos_i: [usize; 3],
    pos_j: [usize; 3],
    extents: [usize; 3],
) -> Result<usize, AttentionError> {
    for pos in [pos_i, pos_j] {
        if pos.iter().zip(&extents).any(|(p, e)| p >= e) {
            return Err(AttentionError::OutOfGrid {
                position: pos,
                extents,
            });
        }
    }
    let mut index = 0usize;
    for k in 0..3 {
        let delta = pos_i[k] as i64 - pos_j[k] as i64 + (extents[k] as i64 - 1);
        index = index * (2 * extents[k] - 1) + delta as usize;
    }
    Ok(index)
}

/// Learnable-shaped bias weights indexed by relative offset.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeBiasTable {
    pub extents: [usize; 3],
    values: Vec<f64>,
}

impl RelativeBiasTable {
    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            extents,
            values: vec![0.0; table_len(extents)],
        }
    }

    pub fn from_values(extents: [usize; 3], values: Vec<f64>) -> Result<Self, AttentionError> {
        let expected = table_len(extents);
        if values.len() != expected {
            return Err(AttentionError::TableSize {
                extents,
                expected,
                got: values.len(),
            });
        }
        Ok(Self { extents, values })
    }

    /// Uniform random weights in (-1, 1); stands in for trained values.
    pub fn seeded(extents: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            extents,
            values: (0..table_len(extents))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Expands the offset table into the dense n×n bias matrix
/// `B[i][j] = table[offset(pos_i, pos_j)]`.
pub fn bias_matrix(
    grid: &TokenGrid,
    table: &RelativeBiasTable,
) -> Result<DMatrix<f64>, AttentionError> {
    if table.extents != grid.extents {
        return Err(AttentionError::TableSize {
            extents: grid.extents,
            expected: table_len(grid.extents),
            got: table.values.len(),
        });
    }
    let n = grid.token_count();
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let idx = relative_index(grid.position(i), grid.position(j), grid.extents)?;
            b[(i, j)] = table.values[idx];
        }
    }
    Ok(b)
}

/// Query, key, and value matrices of one attention head, all n×d.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl AttentionInput {
    pub fn new(q: DMatrix<f64>, k: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self, AttentionError> {
        if q.ncols() == 0 {
            return Err(AttentionError::ShapeMismatch(
                "head dimension must be >= 1".into(),
            ));
        }
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(AttentionError::ShapeMismatch(format!(
                "Q {:?}, K {:?}, V {:?} must share one n×d shape",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        Ok(Self { q, k, v })
    }

    pub fn token_count(&self) -> usize {
        self.q.nrows()
    }
}

/// Row-wise numerically stabilized softmax of the attention logits.
fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut row in logits.row_iter_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Attention weights `softmax(QKᵀ/√d + B)` — the linear map the forward
/// pass applies to V.
pub fn attention_weights(
    input: &AttentionInput,
    bias: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AttentionError> {
    let n = input.token_count();
    if bias.shape() != (n, n) {
        return Err(AttentionError::ShapeMismatch(format!(
            "bias is {:?}, expected ({n}, {n})",
            bias.shape()
        )));
    }
    for (name, m) in [("Q", &input.q), ("K", &input.k), ("V", &input.v)] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite(name));
        }
    }
    if bias.iter().any(|v| !v.is_finite()) {
        return Err(AttentionError::NonFinite("bias"));
    }
    let d = input.q.ncols() as f64;
    let mut logits = &input.q * input.k.transpose() / d.sqrt() + bias;
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Forward pass `softmax(QKᵀ/√d + B) · V`; every softmax row sums to one.
pub fn attention_forward(
    input: &AttentionInput,
    bias: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AttentionError> {
    Ok(attention_weights(input, bias)? * &input.v)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0) * scale)
}

/// Seeded run of the kernel's numerical invariants; backs the CLI
/// `attn-selftest` subcommand.
pub fn attention_self_check(seed: u64) -> SelfCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // Softmax rows sum to one across input magnitudes.
    let mut worst_row_gap = 0.0f64;
    for scale in [1e-3, 1.0, 1e3] {
        let grid = TokenGrid::new(2, 2, 2).unwrap();
        let n = grid.token_count();
        let input = AttentionInput::new(
            random_matrix(&mut rng, n, 4, scale),
            random_matrix(&mut rng, n, 4, scale),
            random_matrix(&mut rng, n, 4, scale),
        )
        .unwrap();
        let bias = bias_matrix(&grid, &RelativeBiasTable::seeded(grid.extents, seed ^ 1)).unwrap();
        let weights = attention_weights(&input, &bias).unwrap();
        for row in weights.row_iter() {
            worst_row_gap = worst_row_gap.max((row.sum() - 1.0).abs());
        }
    }
    checks.push(Check::new(
        "softmax_rows_sum_to_one",
        worst_row_gap < 1e-9,
        format!("worst |row sum - 1| = {worst_row_gap:.3e} over magnitudes 1e-3..1e3"),
    ));

    // Offset coverage on the 2×2×2 grid: all pairs hit exactly 27 indices.
    let grid = TokenGrid::new(2, 2, 2).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..grid.token_count() {
        for j in 0..grid.token_count() {
            seen.insert(relative_index(grid.position(i), grid.position(j), grid.extents).unwrap());
        }
    }
    checks.push(Check::new(
        "relative_offsets_cover_table",
        seen.len() == 27 && *seen.iter().max().unwrap() == 26,
        format!("{} distinct offsets (expected 27)", seen.len()),
    ));

    // Closed-form two-token case.
    let q = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let v = DMatrix::from_column_slice(2, 1, &[0.3, -1.7]);
    let input = AttentionInput::new(q.clone(), q.clone(), v).unwrap();
    let out = attention_forward(&input, &DMatrix::zeros(2, 2)).unwrap();
    let sigma = std::f64::consts::E / (std::f64::consts::E + 1.0);
    let expected = sigma * 0.3 + (1.0 - sigma) * (-1.7);
    let gap = (out[(0, 0)] - expected).abs();
    checks.push(Check::new(
        "two_token_closed_form",
        gap < 1e-12,
        format!("|got - closed form| = {gap:.3e}"),
    ));

    // Finite differences of the output in V match the attention weights.
    let grid = TokenGrid::new(1, 2, 2).unwrap();
    let n = grid.token_count();
    let input = AttentionInput::new(
        random_matrix(&mut rng, n, 3, 1.0),
        random_matrix(&mut rng, n, 3, 1.0),
        random_matrix(&mut rng, n, 3, 1.0),
    )
    .unwrap();
    let bias = bias_matrix(&grid, &RelativeBiasTable::seeded(grid.extents, seed ^ 2)).unwrap();
    let weights = attention_weights(&input, &bias).unwrap();
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for k in 0..n {
        for l in 0..3 {
            let mut plus = input.clone();
            plus.v[(k, l)] += h;
            let mut minus = input.clone();
            minus.v[(k, l)] -= h;
            let fd = (attention_forward(&plus, &bias).unwrap()
                - attention_forward(&minus, &bias).unwrap())
                / (2.0 * h);
            for i in 0..n {
                for j in 0..3 {
                    let analytic = if j == l { weights[(i, k)] } else { 0.0 };
                    let rel = (fd[(i, j)] - analytic).abs() / analytic.abs().max(1.0);
                    worst_rel = worst_rel.max(rel);
                }
            }
        }
    }
    checks.push(Check::new(
        "value_gradient_finite_difference",
        worst_rel < 1e-6,
        format!("worst relative error {worst_rel:.3e} at h = {h}"),
    ));

    SelfCheckReport { checks }
}
