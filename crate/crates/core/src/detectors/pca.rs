use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Principal subspace of a point cloud; points are scored by their squared
/// distance to it.
#[derive(Debug, Clone)]
pub struct PcaModel {
    mean: DVector<f64>,
    /// Retained components as columns.
    components: DMatrix<f64>,
}

impl PcaModel {
    /// Keeps the fewest leading components whose eigenvalues reach
    /// `variance_fraction` of the total variance.
    pub fn fit(points: &[&[f64]], variance_fraction: f64) -> Self {
        let dim = points.first().map_or(0, |p| p.len());
        let n = points.len().max(1) as f64;
        let mut mean = DVector::zeros(dim);
        for p in points {
            mean += DVector::from_column_slice(p);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(dim, dim);
        for p in points {
            let c = DVector::from_column_slice(p) - &mean;
            cov.syger(1.0 / n, &c, &c, 1.0);
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut keep = 0;
        if total > 0.0 {
            let mut acc = 0.0;
            for &k in &order {
                acc += eig.eigenvalues[k].max(0.0);
                keep += 1;
                if acc >= variance_fraction * total {
                    break;
                }
            }
        }
        let cols: Vec<DVector<f64>> = order[..keep].iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect();
        let components = if cols.is_empty() {
            DMatrix::zeros(dim, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Self { mean, components }
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// Squared norm of the residual after projecting onto the subspace.
    pub fn reconstruction_error(&self, x: &[f64]) -> f64 {
        let c = DVector::from_column_slice(x) - &self.mean;
        let coords = self.components.tr_mul(&c);
        let residual = &c - &self.components * coords;
        residual.norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_in_the_subspace_reconstruct_exactly() {
        // rank-2 cloud in R^5 spanned by u and v
        let u = [1.0, 0.5, -0.2, 0.0, 0.3];
        let v = [0.0, 1.0, 0.4, -0.7, 0.1];
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let a = (i as f64 * 0.37).sin() * 3.0;
                let b = (i as f64 * 0.91).cos();
                (0..5).map(|k| 2.0 + a * u[k] + b * v[k]).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let model = PcaModel::fit(&refs, 0.999_999);
        assert_eq!(model.n_components(), 2);
        let probe: Vec<f64> = (0..5).map(|k| 2.0 + 0.7 * u[k] - 1.3 * v[k]).collect();
        assert!(model.reconstruction_error(&probe) < 1e-20);
        let off: Vec<f64> = (0..5).map(|k| 2.0 + if k == 3 { 1.0 } else { 0.0 }).collect();
        assert!(model.reconstruction_error(&off) > 1e-3);
    }

    #[test]
    fn degenerate_cloud() {
        let p = [1.0, 1.0, 1.0];
        let model = PcaModel::fit(&[&p[..], &p[..]], 0.9);
        assert_eq!(model.n_components(), 0);
        assert_eq!(model.reconstruction_error(&p), 0.0);
    }
}
