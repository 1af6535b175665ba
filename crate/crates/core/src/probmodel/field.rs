use crate::error::{Error, Result};

/// Probability floor `1 / (V * 2^16)` applied to every model output.
pub fn p_floor(v: usize) -> f64 {
    1.0 / (v as f64 * 65536.0)
}

/// Mixes `row` with the floor: `p (1 - V f) + f`. Sums are preserved and the
/// minimum becomes at least `f`.
pub fn apply_floor(row: &mut [f64]) {
    let v = row.len();
    let f = p_floor(v);
    let keep = 1.0 - v as f64 * f;
    for p in row.iter_mut() {
        *p = *p * keep + f;
    }
}

/// Per-position categorical distributions over `V` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalField {
    v: usize,
    positions: Vec<usize>,
    probs: Vec<f64>,
}

impl CategoricalField {
    pub fn new(v: usize, positions: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != positions.len() * v {
            return Err(Error::Dimension(format!(
                "{} probabilities for {} positions at V={v}",
                probs.len(),
                positions.len()
            )));
        }
        let f = Self { v, positions, probs };
        f.validate()?;
        Ok(f)
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.v..(k + 1) * self.v]
    }

    /// Row for grid position `pos`, if present.
    pub fn row_for(&self, pos: usize) -> Option<&[f64]> {
        self.positions.iter().position(|&p| p == pos).map(|k| self.row(k))
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.positions.iter().copied().zip(self.probs.chunks_exact(self.v))
    }

    pub fn validate(&self) -> Result<()> {
        for (pos, row) in self.rows() {
            validate_row(pos, row)?;
        }
        Ok(())
    }
}

/// Checks the row invariants: finite, sums to one within `1e-9`, every
/// entry at least the floor.
pub fn validate_row(pos: usize, row: &[f64]) -> Result<()> {
    let floor = p_floor(row.len());
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() {
            return Err(Error::BadProbabilities { pos, reason: format!("non-finite entry {p}") });
        }
        if p < floor {
            return Err(Error::BadProbabilities { pos, reason: format!("entry {p:e} below floor {floor:e}") });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadProbabilities { pos, reason: format!("row sums to {sum}") });
    }
    Ok(())
}

/// Every probability exactly `1/V`.
pub fn uniform_field(positions: &[usize], v: usize) -> Result<CategoricalField> {
    if v < 2 {
        return Err(Error::InvalidArgument(format!("V must be >= 2, got {v}")));
    }
    let p = 1.0 / v as f64;
    Ok(CategoricalField { v, positions: positions.to_vec(), probs: vec![p; positions.len() * v] })
}

/// Shannon entropy of a row in bits.
pub fn entropy_bits(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
}
