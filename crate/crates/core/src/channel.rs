//! Free-space link physics: SNR, Shannon capacity, available capacity and hop delay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridPos;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("endpoints are co-located; path loss is undefined at zero distance")]
    ZeroDistance,
    #[error("link has no available capacity ({available} bit/s)")]
    NoAvailableCapacity { available: f64 },
    #[error("channel parameter `{0}` must be strictly positive")]
    NonPositive(&'static str),
}

/// Radio constants shared by every link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Transmit power, W.
    pub tx_power: f64,
    pub gain_tx: f64,
    pub gain_rx: f64,
    /// Carrier wavelength, m.
    pub wavelength: f64,
    /// Noise power, W.
    pub noise_power: f64,
    /// Bandwidth, Hz.
    pub bandwidth: f64,
    /// Propagation speed, m/s.
    pub prop_speed: f64,
    /// Metres per grid cell.
    pub cell_size: f64,
    /// Include the `d / v` term in hop delay.
    pub propagation_delay: bool,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            tx_power: 1.0,
            gain_tx: 1.0,
            gain_rx: 1.0,
            wavelength: 0.125,
            noise_power: 1e-9,
            bandwidth: 10e6,
            prop_speed: 3e8,
            cell_size: 1.0,
            propagation_delay: false,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let checks = [
            (self.tx_power, "tx_power"),
            (self.gain_tx, "gain_tx"),
            (self.gain_rx, "gain_rx"),
            (self.wavelength, "wavelength"),
            (self.noise_power, "noise_power"),
            (self.bandwidth, "bandwidth"),
            (self.prop_speed, "prop_speed"),
            (self.cell_size, "cell_size"),
        ];
        for (v, name) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ChannelError::NonPositive(name));
            }
        }
        Ok(())
    }

    /// Euclidean separation of two cells in metres.
    pub fn distance_m(&self, a: GridPos, b: GridPos) -> f64 {
        a.euclidean(b) * self.cell_size
    }

    /// SNR at a separation of `d` metres.
    pub fn snr_at(&self, d: f64) -> Result<f64, ChannelError> {
        if d <= 0.0 {
            return Err(ChannelError::ZeroDistance);
        }
        let four_pi = 4.0 * std::f64::consts::PI;
        let num = self.tx_power * self.gain_tx * self.gain_rx * self.wavelength * self.wavelength;
        Ok(num / (four_pi * four_pi * self.noise_power * d * d))
    }

    /// Shannon capacity in bit/s of a link spanning `d` metres.
    pub fn capacity_at(&self, d: f64) -> Result<f64, ChannelError> {
        Ok(capacity(self, self.snr_at(d)?))
    }
}

/// Received SNR between two cells.
pub fn snr(params: &ChannelParams, p_i: GridPos, p_j: GridPos) -> Result<f64, ChannelError> {
    params.snr_at(params.distance_m(p_i, p_j))
}

/// `B log2(1 + snr)`.
pub fn capacity(params: &ChannelParams, snr: f64) -> f64 {
    params.bandwidth * snr.ln_1p() / std::f64::consts::LN_2
}

/// Physical state of a single undirected link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    /// Euclidean length, m.
    pub distance: f64,
    /// Shannon capacity, bit/s.
    pub capacity: f64,
    /// Carried load.
    pub load: f64,
}

impl LinkState {
    pub fn new(distance: f64, capacity: f64, load: f64) -> Self {
        Self { distance, capacity, load }
    }

    pub fn available(&self) -> f64 {
        (self.capacity - self.load).max(0.0)
    }
}

/// Delay to push `payload` across one hop: `d/v + payload / available`.
pub fn hop_delay(params: &ChannelParams, link: &LinkState, payload: f64) -> Result<f64, ChannelError> {
    let avail = link.available();
    if avail <= 0.0 {
        return Err(ChannelError::NoAvailableCapacity { available: avail });
    }
    let tx = payload / avail;
    if params.propagation_delay {
        Ok(link.distance / params.prop_speed + tx)
    } else {
        Ok(tx)
    }
}
