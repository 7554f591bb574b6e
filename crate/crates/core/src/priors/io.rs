//! Text serialization of [`PriorParams`].

use nalgebra::{DMatrix, DVector};

use super::gmm::Gmm;
use super::params::{BetaParams, LogNormal, PriorParams, SkyWindow};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

impl PriorParams {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("star_prob", format!("{}", self.star_prob));
        for (i, f) in self.flux.iter().enumerate() {
            kv.push_floats(format!("flux[{i}]"), &[f.log_mean, f.log_var]);
        }
        for (i, g) in self.color_gmm.iter().enumerate() {
            kv.push_floats(format!("color_gmm[{i}].weights"), &g.weights);
            for (j, m) in g.means.iter().enumerate() {
                kv.push_floats(format!("color_gmm[{i}].means[{j}]"), m.as_slice());
            }
            for (j, c) in g.covs.iter().enumerate() {
                // column-major equals row-major for symmetric matrices
                kv.push_floats(format!("color_gmm[{i}].covs[{j}]"), c.as_slice());
            }
        }
        kv.push_floats("radius", &[self.radius.log_mean, self.radius.log_var]);
        kv.push_floats("profile", &[self.profile.alpha, self.profile.beta]);
        kv.push_floats("axis", &[self.axis.alpha, self.axis.beta]);
        let w = &self.window;
        kv.push_floats("window", &[w.lon[0], w.lon[1], w.lat[0], w.lat[1]]);
        kv
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# flux and radius: mean and variance of the log; profile and axis: beta shapes\n\
             # index 0 = galaxy, 1 = star; window = lon_min lon_max lat_min lat_max (degrees)\n",
        );
        out.push_str(&self.to_key_values().render());
        out
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let pair = |key: &str| -> Result<[f64; 2]> {
            let v = kv.floats_exact(key, 2)?;
            Ok([v[0], v[1]])
        };
        let flux = [0, 1].map(|i| pair(&format!("flux[{i}]")));
        let [f0, f1] = flux;
        let (f0, f1) = (f0?, f1?);
        let mut gmms = Vec::with_capacity(2);
        for i in 0..2 {
            let weights = kv.floats(&format!("color_gmm[{i}].weights"))?;
            let mut means = Vec::with_capacity(weights.len());
            let mut covs = Vec::with_capacity(weights.len());
            for j in 0..weights.len() {
                let m = kv.floats(&format!("color_gmm[{i}].means[{j}]"))?;
                let d = m.len();
                let c = kv.floats_exact(&format!("color_gmm[{i}].covs[{j}]"), d * d)?;
                means.push(DVector::from_vec(m));
                covs.push(DMatrix::from_column_slice(d, d, &c));
            }
            gmms.push(Gmm { weights, means, covs });
        }
        let [g0, g1]: [Gmm; 2] = gmms.try_into().map_err(|_| Error::Parse("color mixtures".into()))?;
        let radius = pair("radius")?;
        let profile = pair("profile")?;
        let axis = pair("axis")?;
        let w = kv.floats_exact("window", 4)?;
        let prior = Self {
            star_prob: kv.parse_value("star_prob")?,
            flux: [LogNormal::new(f0[0], f0[1]), LogNormal::new(f1[0], f1[1])],
            color_gmm: [g0, g1],
            radius: LogNormal::new(radius[0], radius[1]),
            profile: BetaParams::new(profile[0], profile[1]),
            axis: BetaParams::new(axis[0], axis[1]),
            window: SkyWindow {
                lon: [w[0], w[1]],
                lat: [w[2], w[3]],
            },
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
