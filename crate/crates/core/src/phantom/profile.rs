use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::labels::DEFAULT_CALC_THRESHOLDS;
use crate::error::{Error, Result};

/// CAD-RADS 0..5 patient counts of the reference clinical cohort.
pub const REFERENCE_CADRADS_COUNTS: [f64; 6] = [436.0, 584.0, 873.0, 568.0, 348.0, 58.0];

/// Knobs of the synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomProfile {
    /// Relative CAD-RADS class frequencies; normalised on use.
    pub cadrads_priors: Vec<f64>,
    /// Standard deviation of additive voxel noise, in HU.
    pub noise_sigma_hu: f64,
    /// Fraction of patients whose CAD-RADS sits one class off their
    /// severest stenosis, with the severest degree near the shared boundary.
    pub boundary_noise: f64,
    /// Distance from the class boundary (in degree units) of such cases.
    pub boundary_band: f64,
    pub lumen_hu: f64,
    pub background_hu: f64,
    pub calcium_hu: f64,
    pub hu_min: f64,
    pub hu_max: f64,
    pub calc_thresholds: [f64; 4],
    /// Mean number of calcium blobs per patient, indexed by severest class.
    pub calc_rates: [f64; 6],
    /// Probability that a diseased patient carries exactly one lesion.
    pub single_lesion_fraction: f64,
    pub max_extra_lesions: usize,
    /// Number of longitudinal planes consumers slice per segment.
    pub planes: usize,
}

impl Default for PhantomProfile {
    fn default() -> Self {
        PhantomProfile {
            cadrads_priors: REFERENCE_CADRADS_COUNTS.to_vec(),
            noise_sigma_hu: 30.0,
            boundary_noise: 0.15,
            boundary_band: 0.05,
            lumen_hu: 400.0,
            background_hu: 0.0,
            calcium_hu: 1000.0,
            hu_min: -324.0,
            hu_max: 1176.0,
            calc_thresholds: DEFAULT_CALC_THRESHOLDS,
            calc_rates: [0.0, 0.8, 1.6, 2.6, 3.6, 4.2],
            single_lesion_fraction: 0.35,
            max_extra_lesions: 4,
            planes: 2,
        }
    }
}

impl PhantomProfile {
    /// Low noise, rare label edge cases.
    pub fn easy() -> Self {
        PhantomProfile {
            noise_sigma_hu: 20.0,
            boundary_noise: 0.05,
            ..Self::default()
        }
    }

    /// High noise, frequent label edge cases.
    pub fn hard() -> Self {
        PhantomProfile {
            noise_sigma_hu: 60.0,
            boundary_noise: 0.15,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: PhantomProfile = toml::from_str(text).map_err(|e| Error::config(format!("profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.normalized_priors()?;
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("boundary_noise", self.boundary_noise)?;
        unit("single_lesion_fraction", self.single_lesion_fraction)?;
        if !(self.boundary_band > 0.0 && self.boundary_band <= 0.1) {
            return Err(Error::config(format!(
                "boundary_band = {} outside (0, 0.1]",
                self.boundary_band
            )));
        }
        if !(self.noise_sigma_hu >= 0.0 && self.noise_sigma_hu.is_finite()) {
            return Err(Error::config("noise_sigma_hu must be finite and non-negative"));
        }
        if !(self.hu_min < self.hu_max) {
            return Err(Error::config("hu_min must be below hu_max"));
        }
        if self.calc_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("calc_thresholds must be strictly ascending"));
        }
        if self.calc_rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::config("calc_rates must be finite and non-negative"));
        }
        if self.max_extra_lesions > 10 {
            return Err(Error::config("max_extra_lesions cannot exceed 10"));
        }
        if self.planes == 0 || self.planes > 16 {
            return Err(Error::config("planes must be in 1..=16"));
        }
        Ok(())
    }

    pub fn normalized_priors(&self) -> Result<[f64; 6]> {
        let p = &self.cadrads_priors;
        if p.len() != 6 {
            return Err(Error::config(format!(
                "cadrads_priors needs 6 entries, got {}",
                p.len()
            )));
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!(
                "cadrads_priors {p:?} must be finite and non-negative"
            )));
        }
        let total: f64 = p.iter().sum();
        if total <= 0.0 {
            return Err(Error::config("cadrads_priors sum to zero"));
        }
        let mut out = [0.0; 6];
        for (o, v) in out.iter_mut().zip(p) {
            *o = v / total;
        }
        Ok(out)
    }

    /// SHA-256 over the canonical TOML rendering.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }
}
