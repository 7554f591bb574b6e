use crate::error::{Error, Result};

/// Fixed mixing weights and variance multipliers of the two extremal galaxy
/// profiles. Row 0 is de Vaucouleurs, row 1 is exponential. Variances are in
/// units of the squared half-light radius.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTable {
    pub weights: [Vec<f64>; 2],
    pub scales: [Vec<f64>; 2],
}

// Generated by scripts/fit_profiles.py (K = 8, r in (0, 8] half-light radii).
// DEV: residual cost 4.344e-05
const DEV_WEIGHTS: [f64; 8] = [
    0.0003336583744746265,
    0.002186441273439133,
    0.009618531822857709,
    0.032299329825876806,
    0.08668918345191148,
    0.187151103840013,
    0.31467971587287963,
    0.3670420355385477,
];
const DEV_SCALES: [f64; 8] = [
    4.765532589191297e-06,
    5.255458513246258e-05,
    0.000399302818849555,
    0.0025245572488465373,
    0.014671389548915028,
    0.08453669805301052,
    0.5326214583092675,
    4.578116440084565,
];
// EXP: residual cost 6.218e-09
const EXP_WEIGHTS: [f64; 8] = [
    6.548537889403113e-05,
    0.0008559038621186806,
    0.0061453673460380494,
    0.031217053601353795,
    0.11719790866436172,
    0.2983381335970163,
    0.3968828222963511,
    0.14929732525386635,
];
const EXP_SCALES: [f64; 8] = [
    0.0005776546815618726,
    0.004232301203351935,
    0.018499652697212925,
    0.06312172105726854,
    0.18473514421396373,
    0.4861324446658123,
    1.1867950399207983,
    2.8008631945921434,
];

impl ProfileTable {
    /// The checked-in eight-component fits.
    pub fn standard() -> Self {
        Self {
            weights: [DEV_WEIGHTS.to_vec(), EXP_WEIGHTS.to_vec()],
            scales: [DEV_SCALES.to_vec(), EXP_SCALES.to_vec()],
        }
    }

    pub fn max_scale(&self) -> f64 {
        self.scales.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn components(&self) -> usize {
        self.weights[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            if self.weights[i].len() != self.scales[i].len() {
                return Err(Error::InvalidParameter("profile table row lengths differ".into()));
            }
            let sum: f64 = self.weights[i].iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParameter(format!("profile row {i} sums to {sum}")));
            }
            if self.scales[i].iter().any(|&t| !(t > 0.0)) {
                return Err(Error::InvalidParameter("non-positive profile scale".into()));
            }
        }
        Ok(())
    }

    /// Rescales each row of weights to sum to one.
    pub fn normalized(mut self) -> Self {
        for row in self.weights.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= s);
        }
        self
    }
}

impl Default for ProfileTable {
    fn default() -> Self {
        Self::standard()
    }
}
