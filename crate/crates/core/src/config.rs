//! Scalar system parameters and unit conversions.

use serde::{Deserialize, Serialize};

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    db_to_linear(dbm)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PilotAssignment {
    /// `pilot_of[k] = k mod tau_p`.
    #[default]
    RoundRobin,
    /// Seeded shuffle of the UEs followed by round-robin, so cosets stay balanced.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArrayOrientation {
    /// All ULAs share the global x-axis broadside.
    #[default]
    Common,
    /// Each AP gets an independent uniform orientation.
    RandomPerAp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationModel {
    /// Gaussian local scattering around the LoS angle.
    #[default]
    LocalScattering,
    /// `R = beta_nlos * I`.
    Uncorrelated,
}

/// Everything needed to generate one network drop and its channel blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of APs (M).
    pub ap_count: usize,
    /// Antennas per AP (N).
    pub antennas: usize,
    /// Number of UEs (K).
    pub ue_count: usize,
    pub area_side_m: f64,
    /// Coherence block length in channel uses.
    pub coherence_len: usize,
    /// Pilot length in channel uses, also the number of orthogonal pilots.
    pub pilot_len: usize,
    pub data_power_mw: f64,
    pub pilot_power_mw: f64,
    /// Optional per-UE data powers overriding `data_power_mw` (entries may be zero).
    pub ue_data_power_mw: Vec<f64>,
    pub noise_dbm: f64,
    /// ULA element spacing in wavelengths.
    pub antenna_spacing: f64,
    /// Angular standard deviation of the local scattering model, degrees.
    pub asd_deg: f64,
    pub shadow_delta_f: f64,
    pub decorrelation_m: f64,
    pub shadow_std_db: f64,
    pub height_diff_m: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub quadrature_order: usize,
    pub pilot_assignment: PilotAssignment,
    pub array_orientation: ArrayOrientation,
    pub correlation: CorrelationModel,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            ap_count: 100,
            antennas: 4,
            ue_count: 40,
            area_side_m: 1000.0,
            coherence_len: 200,
            pilot_len: 10,
            data_power_mw: 200.0,
            pilot_power_mw: 200.0,
            ue_data_power_mw: Vec::new(),
            noise_dbm: -94.0,
            antenna_spacing: 0.5,
            asd_deg: 15.0,
            shadow_delta_f: 0.5,
            decorrelation_m: 100.0,
            shadow_std_db: 8.0,
            height_diff_m: 11.0,
            kappa_a: 1.3,
            kappa_b: 0.003,
            quadrature_order: 100,
            pilot_assignment: PilotAssignment::RoundRobin,
            array_orientation: ArrayOrientation::Common,
            correlation: CorrelationModel::LocalScattering,
        }
    }
}

impl SystemConfig {
    /// Desk-scale defaults: completes a full estimator/combiner sweep in minutes.
    pub fn desk() -> Self {
        Self {
            ap_count: 20,
            antennas: 2,
            ue_count: 8,
            pilot_len: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ap_count == 0 {
            return Err(invalid("ap_count", "must be at least 1"));
        }
        if self.antennas == 0 {
            return Err(invalid("antennas", "must be at least 1"));
        }
        if self.ue_count == 0 {
            return Err(invalid("ue_count", "must be at least 1"));
        }
        if self.ap_count >= 1 << 16 || self.ue_count >= 1 << 16 || self.antennas > 256 {
            return Err(invalid("ap_count", "AP/UE counts must be below 65536 and N at most 256"));
        }
        if self.pilot_len == 0 {
            return Err(invalid("pilot_len", "must be at least 1"));
        }
        if self.coherence_len < self.pilot_len {
            return Err(invalid("coherence_len", "must not be shorter than pilot_len"));
        }
        if !(self.data_power_mw > 0.0) {
            return Err(invalid("data_power_mw", "must be strictly positive"));
        }
        if !(self.pilot_power_mw > 0.0) {
            return Err(invalid("pilot_power_mw", "must be strictly positive"));
        }
        if !self.ue_data_power_mw.is_empty() {
            if self.ue_data_power_mw.len() != self.ue_count {
                return Err(invalid(
                    "ue_data_power_mw",
                    format!("expected {} entries, got {}", self.ue_count, self.ue_data_power_mw.len()),
                ));
            }
            if self.ue_data_power_mw.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(invalid("ue_data_power_mw", "entries must be finite and nonnegative"));
            }
        }
        if !self.noise_dbm.is_finite() {
            return Err(invalid("noise_dbm", "must be finite"));
        }
        if !(self.antenna_spacing > 0.0) {
            return Err(invalid("antenna_spacing", "must be strictly positive"));
        }
        if !(self.asd_deg >= 0.0) {
            return Err(invalid("asd_deg", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.shadow_delta_f) {
            return Err(invalid("shadow_delta_f", "must lie in [0, 1]"));
        }
        if !(self.decorrelation_m > 0.0) {
            return Err(invalid("decorrelation_m", "must be strictly positive"));
        }
        if !(self.shadow_std_db >= 0.0) {
            return Err(invalid("shadow_std_db", "must be nonnegative"));
        }
        if !(self.area_side_m > 0.0) {
            return Err(invalid("area_side_m", "must be strictly positive"));
        }
        if !(self.height_diff_m >= 0.0) {
            return Err(invalid("height_diff_m", "must be nonnegative"));
        }
        if !(1..=256).contains(&self.quadrature_order) {
            return Err(invalid("quadrature_order", "must lie in [1, 256]"));
        }
        Ok(())
    }

    /// Noise power in mW.
    pub fn sigma2(&self) -> f64 {
        dbm_to_mw(self.noise_dbm)
    }

    /// ASD in radians.
    pub fn sigma_phi(&self) -> f64 {
        self.asd_deg.to_radians()
    }

    pub fn data_power(&self, k: usize) -> f64 {
        self.ue_data_power_mw.get(k).copied().unwrap_or(self.data_power_mw)
    }

    pub fn data_powers(&self) -> Vec<f64> {
        (0..self.ue_count).map(|k| self.data_power(k)).collect()
    }

    pub fn pilot_power(&self, _k: usize) -> f64 {
        self.pilot_power_mw
    }

    pub fn data_len(&self) -> usize {
        self.coherence_len - self.pilot_len
    }

    /// Fraction of each coherence block spent on data, `tau_u / tau_c`.
    pub fn prelog(&self) -> f64 {
        self.data_len() as f64 / self.coherence_len as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        SystemConfig::default().validate().unwrap();
        SystemConfig::desk().validate().unwrap();
        let cfg = SystemConfig::default();
        assert_eq!(cfg.prelog(), 190.0 / 200.0);
        assert!((cfg.sigma2() - 10f64.powf(-9.4)).abs() < 1e-22);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = SystemConfig {
            pilot_len: 0,
            ..SystemConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(ConfigError::Invalid { field: "pilot_len", .. })));
        let bad = SystemConfig {
            coherence_len: 3,
            ..SystemConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = SystemConfig {
            data_power_mw: 0.0,
            ..SystemConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = SystemConfig {
            ue_data_power_mw: vec![1.0; 3],
            ..SystemConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn db_round_trip() {
        assert!((db_to_linear(-30.18) - 10f64.powf(-3.018)).abs() < 1e-18);
        assert!((linear_to_db(db_to_linear(-56.18)) + 56.18).abs() < 1e-12);
    }
}
