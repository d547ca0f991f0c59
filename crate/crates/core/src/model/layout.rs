//! Flat latent-vector layout and per-cell design rows.
//!
//! Ordering is chosen for low fill-in in the LDL factorization: the
//! exchangeable block first (eliminates cheaply), then the structured area
//! block (graph-sparse), then the densely coupled fixed effects last.

use std::ops::Range;

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::model::{LatentField, ModelSpec};
use crate::population::CovariateMatrix;

#[derive(Debug, Clone)]
pub struct LatentLayout {
    j_count: usize,
    d_count: usize,
    k_count: usize,
    shared_cov: bool,
    nu_offset: Option<usize>,
    upsilon_offset: Option<usize>,
    beta2_offset: Option<usize>,
    beta2_len: usize,
    beta1_offset: usize,
    beta0_offset: usize,
    total: usize,
    /// Per-cell sparse design rows (index, coefficient), group-major.
    rows: Vec<Vec<(u32, f64)>>,
}

impl LatentLayout {
    pub fn new(
        spec: &ModelSpec,
        j_count: usize,
        d_count: usize,
        covariates: Option<&CovariateMatrix>,
    ) -> Result<LatentLayout> {
        let k_count = if spec.include_covariates {
            let x = covariates.ok_or_else(|| {
                Error::Validation("model includes covariates but none were provided".into())
            })?;
            if !x.scaled() {
                return Err(Error::Validation(
                    "covariates must be column-standardized before fitting".into(),
                ));
            }
            if x.d_count() != d_count {
                return Err(Error::Validation(
                    "covariate rows do not match area count".into(),
                ));
            }
            x.k_count()
        } else {
            0
        };

        let mut next = 0usize;
        let nu_offset = spec.include_exchangeable.then(|| {
            let o = next;
            next += j_count * d_count;
            o
        });
        let upsilon_offset = spec.include_spatial.then(|| {
            let o = next;
            next += d_count;
            o
        });
        let beta2_len = if spec.include_covariates {
            if spec.shared_covariate_coefficients {
                k_count
            } else {
                j_count * k_count
            }
        } else {
            0
        };
        let beta2_offset = (beta2_len > 0).then(|| {
            let o = next;
            next += beta2_len;
            o
        });
        let beta1_offset = next;
        next += j_count.saturating_sub(1);
        let beta0_offset = next;
        next += 1;

        let mut layout = LatentLayout {
            j_count,
            d_count,
            k_count,
            shared_cov: spec.shared_covariate_coefficients,
            nu_offset,
            upsilon_offset,
            beta2_offset,
            beta2_len,
            beta1_offset,
            beta0_offset,
            total: next,
            rows: Vec::new(),
        };
        layout.rows = layout.build_rows(covariates);
        Ok(layout)
    }

    fn build_rows(&self, covariates: Option<&CovariateMatrix>) -> Vec<Vec<(u32, f64)>> {
        let mut rows = Vec::with_capacity(self.j_count * self.d_count);
        for j in 0..self.j_count {
            for d in 0..self.d_count {
                let mut row: Vec<(u32, f64)> = Vec::with_capacity(4 + self.k_count);
                if let Some(o) = self.nu_offset {
                    row.push(((o + j * self.d_count + d) as u32, 1.0));
                }
                if let Some(o) = self.upsilon_offset {
                    row.push(((o + d) as u32, 1.0));
                }
                if let (Some(o), Some(x)) = (self.beta2_offset, covariates) {
                    for k in 0..self.k_count {
                        let idx = if self.shared_cov {
                            o + k
                        } else {
                            o + j * self.k_count + k
                        };
                        let v = x.value(d, k);
                        if v != 0.0 {
                            row.push((idx as u32, v));
                        }
                    }
                }
                if j >= 1 {
                    row.push(((self.beta1_offset + j - 1) as u32, 1.0));
                }
                row.push((self.beta0_offset as u32, 1.0));
                rows.push(row);
            }
        }
        rows
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn j_count(&self) -> usize {
        self.j_count
    }

    pub fn d_count(&self) -> usize {
        self.d_count
    }

    pub fn k_count(&self) -> usize {
        self.k_count
    }

    #[inline]
    pub fn row(&self, j: usize, d: usize) -> &[(u32, f64)] {
        &self.rows[j * self.d_count + d]
    }

    pub fn nu_range(&self) -> Option<Range<usize>> {
        self.nu_offset.map(|o| o..o + self.j_count * self.d_count)
    }

    pub fn upsilon_range(&self) -> Option<Range<usize>> {
        self.upsilon_offset.map(|o| o..o + self.d_count)
    }

    pub fn beta2_range(&self) -> Option<Range<usize>> {
        self.beta2_offset.map(|o| o..o + self.beta2_len)
    }

    pub fn beta1_range(&self) -> Range<usize> {
        self.beta1_offset..self.beta1_offset + self.j_count.saturating_sub(1)
    }

    pub fn beta0_index(&self) -> usize {
        self.beta0_offset
    }

    /// Indices of all fixed effects (beta2, beta1, beta0).
    pub fn fixed_range(&self) -> Range<usize> {
        let start = self.beta2_offset.unwrap_or(self.beta1_offset);
        start..self.total
    }

    #[inline]
    pub fn theta(&self, z: &[f64], j: usize, d: usize) -> f64 {
        self.row(j, d).iter().map(|&(i, c)| c * z[i as usize]).sum()
    }

    pub fn theta_grid(&self, z: &[f64]) -> CellGrid<f64> {
        CellGrid::from_fn(self.j_count, self.d_count, |j, d| self.theta(z, j, d))
    }

    /// Unpack a flat vector into the user-facing field structure.
    pub fn unpack(&self, z: &[f64]) -> LatentField {
        debug_assert_eq!(z.len(), self.total);
        let mut beta1 = vec![0.0; self.j_count];
        for (jm1, i) in self.beta1_range().enumerate() {
            beta1[jm1 + 1] = z[i];
        }
        LatentField {
            beta0: z[self.beta0_offset],
            beta1,
            beta2: self
                .beta2_range()
                .map(|r| z[r].to_vec())
                .unwrap_or_default(),
            upsilon: self
                .upsilon_range()
                .map(|r| z[r].to_vec())
                .unwrap_or_default(),
            nu: self.nu_range().map(|r| z[r].to_vec()).unwrap_or_default(),
        }
    }

    /// Pack the field structure into a flat vector.
    pub fn pack(&self, field: &LatentField) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.total];
        z[self.beta0_offset] = field.beta0;
        if field.beta1.len() != self.j_count {
            return Err(Error::Validation(
                "beta1 must have one entry per group".into(),
            ));
        }
        if field.beta1[0] != 0.0 {
            return Err(Error::Validation(
                "identifiability requires beta1[0] == 0".into(),
            ));
        }
        for (jm1, i) in self.beta1_range().enumerate() {
            z[i] = field.beta1[jm1 + 1];
        }
        if let Some(r) = self.beta2_range() {
            if field.beta2.len() != r.len() {
                return Err(Error::Validation(format!(
                    "beta2 must have {} entries, got {}",
                    r.len(),
                    field.beta2.len()
                )));
            }
            z[r].copy_from_slice(&field.beta2);
        }
        if let Some(r) = self.upsilon_range() {
            if field.upsilon.len() != r.len() {
                return Err(Error::Validation(
                    "upsilon must have one entry per area".into(),
                ));
            }
            z[r].copy_from_slice(&field.upsilon);
        }
        if let Some(r) = self.nu_range() {
            if field.nu.len() != r.len() {
                return Err(Error::Validation("nu must have one entry per cell".into()));
            }
            z[r].copy_from_slice(&field.nu);
        }
        Ok(z)
    }
}
