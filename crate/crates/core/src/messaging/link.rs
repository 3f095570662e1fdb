use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latency/bandwidth/jitter/loss model of one directed link.
///
/// Delivery time of an envelope sent at `t` is
/// `t + base_latency + payload_len / bandwidth + U(-jitter, +jitter)`,
/// clamped so the total delay is never negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// Seconds.
    pub base_latency: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Half-width of the uniform jitter, seconds.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub loss_rate: f64,
}

impl LinkModel {
    pub fn new(base_latency: f64, bandwidth: f64, jitter: f64, loss_rate: f64) -> Result<Self> {
        let m = Self {
            base_latency,
            bandwidth,
            jitter,
            loss_rate,
        };
        m.validate()?;
        Ok(m)
    }

    /// A local wireless LAN: 2 ms latency, 2.5 MB/s, 0.5 ms jitter, no loss.
    pub fn wireless_lan() -> Self {
        Self {
            base_latency: 0.002,
            bandwidth: 2.5e6,
            jitter: 0.0005,
            loss_rate: 0.0,
        }
    }

    /// Same-host delivery.
    pub fn loopback() -> Self {
        Self {
            base_latency: 0.0,
            bandwidth: f64::INFINITY,
            jitter: 0.0,
            loss_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_latency.is_finite() || self.base_latency < 0.0 {
            return Err(Error::InvalidLinkModel(format!(
                "base_latency must be >= 0, got {}",
                self.base_latency
            )));
        }
        if self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return Err(Error::InvalidLinkModel(format!(
                "bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if !self.jitter.is_finite() || self.jitter < 0.0 {
            return Err(Error::InvalidLinkModel(format!(
                "jitter must be >= 0, got {}",
                self.jitter
            )));
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(Error::InvalidLinkModel(format!(
                "loss_rate must be in [0, 1), got {}",
                self.loss_rate
            )));
        }
        Ok(())
    }

    /// Deterministic part of the delay for a payload of `len` bytes, seconds.
    pub fn transfer_secs(&self, len: usize) -> f64 {
        self.base_latency + len as f64 / self.bandwidth
    }
}

impl Default for LinkModel {
    fn default() -> Self {
        Self::wireless_lan()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_substitution() {
        let m = LinkModel::new(0.010, 1e6, 0.0, 0.0).unwrap();
        assert!((m.transfer_secs(1_000_000) - 1.010).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_models() {
        assert!(LinkModel::new(-0.1, 1e6, 0.0, 0.0).is_err());
        assert!(LinkModel::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(LinkModel::new(0.0, 1e6, -1.0, 0.0).is_err());
        assert!(LinkModel::new(0.0, 1e6, 0.0, 1.0).is_err());
        assert!(LinkModel::new(0.0, 1e6, 0.0, f64::NAN).is_err());
        assert!(LinkModel::loopback().validate().is_ok());
    }
}
