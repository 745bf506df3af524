use serde::{Deserialize, Serialize};

use super::spectral::operator_norm;
use crate::error::{Error, Result};
use crate::model::LayerTrace;
use crate::tensor::Tensor;

/// Mean pairwise cosine similarity with the bookkeeping for zero rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosSim {
    pub value: f64,
    /// Rows that entered the average.
    pub rows: usize,
    /// Zero rows that were skipped.
    pub zero_rows: usize,
}

/// Mean cosine similarity over ordered pairs of distinct rows of `[n, d]`.
pub fn cos_sim(b: &Tensor) -> Result<f64> {
    Ok(cos_sim_detailed(b)?.value)
}

/// As [`cos_sim`], reporting how many zero rows were excluded.
///
/// Uses `Σ_{i≠j} uᵢ·uⱼ = ‖Σᵢ uᵢ‖² − n` for unit rows `uᵢ`, so the cost is
/// linear in `n`.
pub fn cos_sim_detailed(b: &Tensor) -> Result<CosSim> {
    if b.rank() != 2 {
        return Err(Error::Contract(format!("cos_sim expects [n, d], got {:?}", b.shape())));
    }
    let d = b.shape()[1];
    let mut sum = vec![0.0; d];
    let (mut rows, mut zero_rows) = (0usize, 0usize);
    for i in 0..b.shape()[0] {
        let row = b.row(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_rows += 1;
            continue;
        }
        if !norm.is_finite() {
            return Err(Error::Domain {
                op: "cos_sim",
                detail: format!("non-finite row {i}"),
            });
        }
        rows += 1;
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x / norm;
        }
    }
    if rows < 2 {
        return Err(Error::Domain {
            op: "cos_sim",
            detail: format!("undefined with {rows} nonzero rows ({zero_rows} zero rows)"),
        });
    }
    let n = rows as f64;
    let total: f64 = sum.iter().map(|s| s * s).sum();
    let value = ((total - n) / (n * (n - 1.0))).clamp(-1.0, 1.0);
    Ok(CosSim { value, rows, zero_rows })
}

/// Both sides of `CosSim(B) ≤ (‖B‖²_op / b²_min − 1) / (n − 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosSimBound {
    pub cos_sim: f64,
    pub bound: f64,
    pub op_norm: f64,
    pub min_row_norm: f64,
    pub n: usize,
    pub holds: bool,
}

/// Relative slack for the bound comparison: power iteration approaches the
/// operator norm from below, so tight cases need a little room.
pub const BOUND_SLACK: f64 = 1e-9;

pub fn cos_sim_bound(b: &Tensor) -> Result<CosSimBound> {
    let cs = cos_sim_detailed(b)?;
    if cs.zero_rows > 0 {
        return Err(Error::Domain {
            op: "cos_sim_bound",
            detail: format!("{} zero rows", cs.zero_rows),
        });
    }
    let n = cs.rows;
    let min_row_norm = (0..n)
        .map(|i| b.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    let op = operator_norm(b)?.value;
    let bound = ((op / min_row_norm).powi(2) - 1.0) / (n as f64 - 1.0);
    Ok(CosSimBound {
        cos_sim: cs.value,
        bound,
        op_norm: op,
        min_row_norm,
        n,
        holds: cs.value <= bound + BOUND_SLACK * bound.abs().max(1.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityEntry {
    pub label: String,
    pub cos_sim: f64,
    /// Zero token rows skipped, summed over the batch.
    pub zero_rows: usize,
}

/// Per-layer token cosine similarity for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityProfile {
    pub entries: Vec<DiversityEntry>,
    pub batch: String,
    pub exclude_cls: bool,
}

impl DiversityProfile {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.cos_sim).collect()
    }
}

/// Cosine similarity of every traced layer, averaged over the batch. With
/// `exclude_cls`, row 0 of layers that carry a class token is dropped.
pub fn layer_diversity(trace: &LayerTrace, exclude_cls: bool, batch: impl Into<String>) -> Result<DiversityProfile> {
    if trace.entries.is_empty() {
        return Err(Error::Contract("empty layer trace".into()));
    }
    let mut entries = Vec::with_capacity(trace.entries.len());
    for e in &trace.entries {
        let shape = e.tokens.shape();
        if shape.len() != 3 {
            return Err(Error::Contract(format!("trace entry {} has shape {shape:?}", e.label)));
        }
        let (bsz, n, d) = (shape[0], shape[1], shape[2]);
        let skip = usize::from(exclude_cls && e.has_cls);
        let mut acc = 0.0;
        let mut zero_rows = 0;
        for i in 0..bsz {
            let rows = e.tokens.data()[(i * n + skip) * d..(i + 1) * n * d].to_vec();
            let cs = cos_sim_detailed(&Tensor::new(&[n - skip, d], rows)?)?;
            acc += cs.value;
            zero_rows += cs.zero_rows;
        }
        entries.push(DiversityEntry {
            label: e.label.clone(),
            cos_sim: acc / bsz as f64,
            zero_rows,
        });
    }
    Ok(DiversityProfile {
        entries,
        batch: batch.into(),
        exclude_cls,
    })
}
