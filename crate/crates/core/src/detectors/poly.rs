use nalgebra::{DMatrix, DVector};

use super::{DetectorError, DetectorId};

/// One-step-ahead polynomial extrapolation over a fixed trailing window.
///
/// The least-squares fit on an evenly spaced grid is linear in the window
/// values, so the prediction reduces to a fixed filter computed once.
#[derive(Debug, Clone)]
pub struct PolyPredictor {
    filter: Vec<f64>,
}

impl PolyPredictor {
    pub fn new(window: usize, degree: usize) -> Result<Self, DetectorError> {
        if window < degree + 1 {
            return Err(DetectorError::InvalidParams(format!(
                "POLY window {window} too small for degree {degree}"
            )));
        }
        // grid scaled to [-1, 1] for conditioning; the target sits one step past the end
        let half = (window - 1) as f64 / 2.0;
        let scale = |k: f64| (k - half) / half.max(1.0);
        let design = DMatrix::from_fn(window, degree + 1, |r, c| scale(r as f64).powi(c as i32));
        let target = DVector::from_fn(degree + 1, |c, _| scale(window as f64).powi(c as i32));
        let pinv = design
            .pseudo_inverse(1e-12)
            .map_err(|e| DetectorError::InvalidParams(e.to_string()))?;
        let filter = pinv.tr_mul(&target);
        Ok(Self {
            filter: filter.iter().copied().collect(),
        })
    }

    pub fn predict(&self, history: &[f64]) -> f64 {
        self.filter.iter().zip(history).map(|(f, y)| f * y).sum()
    }
}

/// `|prediction - actual|` per point; the first `window` points reuse the
/// first available score.
pub fn poly_scores(values: &[f64], window: usize, degree: usize) -> Result<Vec<f64>, DetectorError> {
    if values.len() <= window {
        return Err(DetectorError::TooShort {
            detector: DetectorId::Poly,
            len: values.len(),
            min: window + 1,
        });
    }
    let predictor = PolyPredictor::new(window, degree)?;
    let tail: Vec<f64> = (window..values.len())
        .map(|t| (predictor.predict(&values[t - window..t]) - values[t]).abs())
        .collect();
    let mut scores = vec![tail[0]; window];
    scores.extend(tail);
    Ok(scores)
}
