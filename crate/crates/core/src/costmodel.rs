//! Energy and latency of one round of local computation and upload.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceCost {
    /// Unit computation cost.
    pub rho: f64,
    /// Effective switched capacitance of the chipset.
    pub zeta: f64,
    /// CPU cycles to process one sample.
    pub cycles_per_sample: f64,
    pub comm_a: f64,
    pub comm_b: f64,
    pub comm_z: f64,
    /// Transmission loss rate in [0, 1).
    pub eps_loss: f64,
    /// Model size in bits.
    pub model_bits: f64,
    /// Mean uplink rate in bits/s.
    pub rate: f64,
}

impl Default for DeviceCost {
    fn default() -> Self {
        Self {
            rho: 0.1,
            zeta: 1e-27,
            cycles_per_sample: 10.0,
            comm_a: 0.0,
            comm_b: 0.0,
            comm_z: 1e-10,
            eps_loss: 0.01,
            model_bits: 1e7,
            rate: 5e6,
        }
    }
}

impl DeviceCost {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            self.rho,
            self.zeta,
            self.cycles_per_sample,
            self.comm_a,
            self.comm_b,
            self.comm_z,
            self.eps_loss,
            self.model_bits,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParam(
                "cost coefficients must be finite and non-negative".into(),
            ));
        }
        if self.eps_loss >= 1.0 {
            return Err(Error::InvalidParam("transmission loss rate must be below 1".into()));
        }
        if !(self.rate > 0.0) {
            return Err(Error::InvalidParam("transmission rate must be positive".into()));
        }
        Ok(())
    }

    /// Coefficient `K` in `comp_energy = K δ²`.
    pub fn energy_coefficient(&self, tau: usize, batch: usize) -> f64 {
        self.rho * tau as f64 * self.cycles_per_sample * batch as f64 * self.zeta
    }

    /// Cycles needed for one round: `τ c |D|`.
    pub fn round_cycles(&self, tau: usize, batch: usize) -> f64 {
        tau as f64 * self.cycles_per_sample * batch as f64
    }
}

fn check_frequency(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidFrequency(delta))
    }
}

/// `ρ τ c |D| ζ δ²`.
pub fn comp_energy(cost: &DeviceCost, tau: usize, batch: usize, delta: f64) -> Result<f64> {
    check_frequency(delta)?;
    Ok(cost.energy_coefficient(tau, batch) * delta * delta)
}

/// `τ c |D| / δ`.
pub fn comp_time(cost: &DeviceCost, tau: usize, batch: usize, delta: f64) -> Result<f64> {
    check_frequency(delta)?;
    Ok(cost.round_cycles(tau, batch) / delta)
}

/// `a (δ/(1−ε))² + b δ/(1−ε) + z`.
pub fn comm_energy(cost: &DeviceCost, delta: f64) -> f64 {
    let x = delta / (1.0 - cost.eps_loss);
    cost.comm_a * x * x + cost.comm_b * x + cost.comm_z
}

/// `W / B`.
pub fn comm_time(cost: &DeviceCost) -> f64 {
    cost.model_bits / cost.rate
}

/// Slowest member's compute-plus-upload time.
pub fn round_latency(members: &[(f64, f64)]) -> Result<f64> {
    members
        .iter()
        .map(|(comp, comm)| comp + comm)
        .reduce(f64::max)
        .ok_or(Error::EmptyCoalition)
}
