use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One realized trajectory: timestamps and the values observed at them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    timestamps: Vec<f64>,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn new(timestamps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Dimension {
                expected: timestamps.len(),
                actual: values.len(),
            });
        }
        check_increasing(&timestamps)?;
        Ok(Self { timestamps, values })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// First differences of the values.
    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.timestamps, self.values)
    }
}

/// Fails unless `grid` is strictly increasing and finite.
pub(crate) fn check_increasing(grid: &[f64]) -> Result<()> {
    if let Some(i) = grid.iter().position(|t| !t.is_finite()) {
        return Err(Error::Domain(format!("time point {i} is not finite")));
    }
    if let Some(i) = grid.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Domain(format!(
            "time points must be strictly increasing (index {} -> {})",
            i,
            i + 1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(matches!(
            SamplePath::new(vec![0.0, 1.0], vec![1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rejects_non_increasing() {
        assert!(SamplePath::new(vec![0.0, 1.0, 1.0], vec![0.0; 3]).is_err());
        assert!(SamplePath::new(vec![0.0, 2.0, 1.0], vec![0.0; 3]).is_err());
    }

    #[test]
    fn increments() {
        let p = SamplePath::new(vec![0.0, 1.0, 2.0], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(p.increments(), vec![2.0, -1.0]);
    }
}
