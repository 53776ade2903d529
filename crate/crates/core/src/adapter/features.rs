use ndarray::{concatenate, Array2, Axis};

use super::error::{AdapterError, Result};
use crate::scalar::Scalar;

/// Pooled video features: temporal rows first, then spatial rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures<S> {
    temporal: Array2<S>,
    spatial: Array2<S>,
    combined: Array2<S>,
}

impl<S: Scalar> VideoFeatures<S> {
    /// `tokens × embed_dim` temporal part.
    pub fn temporal(&self) -> &Array2<S> {
        &self.temporal
    }

    /// `frames × embed_dim` spatial part.
    pub fn spatial(&self) -> &Array2<S> {
        &self.spatial
    }

    /// `(tokens + frames) × embed_dim`.
    pub fn combined(&self) -> &Array2<S> {
        &self.combined
    }

    pub fn row_count(&self) -> usize {
        self.combined.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.combined.ncols()
    }
}

/// Stacks temporal rows on top of spatial rows.
pub fn concat_features<S: Scalar>(temporal: Array2<S>, spatial: Array2<S>) -> Result<VideoFeatures<S>> {
    if temporal.ncols() != spatial.ncols() {
        return Err(AdapterError::Shape(format!(
            "temporal features have width {} but spatial features have width {}",
            temporal.ncols(),
            spatial.ncols()
        )));
    }
    if temporal.nrows() == 0 || spatial.nrows() == 0 || temporal.ncols() == 0 {
        return Err(AdapterError::Shape("feature matrices must be non-empty".into()));
    }
    let combined = concatenate(Axis(0), &[temporal.view(), spatial.view()])
        .map_err(|e| AdapterError::Shape(e.to_string()))?;
    Ok(VideoFeatures {
        temporal,
        spatial,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn temporal_rows_come_first() {
        let v = concat_features(array![[1.0, 2.0]], array![[3.0, 4.0]]).unwrap();
        assert_eq!(v.combined(), &array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(v.temporal(), &array![[1.0, 2.0]]);
        assert_eq!(v.spatial(), &array![[3.0, 4.0]]);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let err = concat_features(Array2::<f64>::zeros((2, 4)), Array2::zeros((3, 5))).unwrap_err();
        assert!(matches!(err, AdapterError::Shape(_)));
    }

    #[test]
    fn paper_scale_shape() {
        let v = concat_features(Array2::<f32>::zeros((256, 1024)), Array2::zeros((8, 1024))).unwrap();
        assert_eq!(v.combined().dim(), (264, 1024));
    }
}
