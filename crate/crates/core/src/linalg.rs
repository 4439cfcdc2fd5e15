use nalgebra::{DMatrix, SVD};

/// Thin SVD `M = U·diag(σ)·Vᵀ` with σ nonincreasing.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(m: DMatrix<f64>) -> Self {
        let svd = SVD::new(m, true, true);
        ThinSvd {
            u: svd.u.expect("U requested"),
            sigma: svd.singular_values.iter().copied().collect(),
            v_t: svd.v_t.expect("Vᵀ requested"),
        }
    }

    /// Balanced rank-`r` factors `(U_r·√Σ_r, √Σ_r·V_rᵀ)`.
    pub fn factors(&self, rank: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut left = self.u.columns(0, rank).into_owned();
        let mut right = self.v_t.rows(0, rank).into_owned();
        for k in 0..rank {
            let s = self.sigma[k].sqrt();
            left.column_mut(k).scale_mut(s);
            right.row_mut(k).scale_mut(s);
        }
        (left, right)
    }

    /// Frobenius norm of the discarded tail, `sqrt(Σ_{d>r} σ_d²)`.
    pub fn tail_norm(&self, rank: usize) -> f64 {
        tail_norm(&self.sigma, rank)
    }
}

pub fn singular_values(m: DMatrix<f64>) -> Vec<f64> {
    SVD::new(m, false, false).singular_values.iter().copied().collect()
}

pub fn tail_norm(sigma: &[f64], rank: usize) -> f64 {
    sigma.iter().skip(rank).fold(0.0, |acc, s| acc + s * s).sqrt()
}
