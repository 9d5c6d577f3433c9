//! Timestamp values, error bounds and drift arithmetic.
//!
//! Everything in here is a plain value type. Time is counted in
//! nanoseconds since the Unix epoch; drift rates are Q32.32 fixed point so
//! that simulated runs produce the same bits on every platform.

use std::fmt;

use thiserror::Error;

/// Node identity inside a cluster.
pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TimeError {
    #[error("clock exhausted: advancing {nanos} by {step} overflows the epoch range")]
    ClockExhausted { nanos: u64, step: u64 },
    #[error("drift rate {0:#x} (Q32.32) outside the plausibility window")]
    ImplausibleRate(u64),
    #[error("resolution unit must be at least one nanosecond")]
    ZeroResolution,
}

/// Where a timestamp value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    LocalCounter,
    Peer(NodeId),
    External,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::LocalCounter => f.write_str("local"),
            Provenance::Peer(id) => write!(f, "peer:{id}"),
            Provenance::External => f.write_str("external"),
        }
    }
}

/// A served time value together with its error bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustedTimestamp {
    pub nanos: u64,
    pub provenance: Provenance,
    pub error_bound_nanos: u64,
}

impl TrustedTimestamp {
    pub fn new(nanos: u64, provenance: Provenance, error_bound_nanos: u64) -> Self {
        Self {
            nanos,
            provenance,
            error_bound_nanos,
        }
    }

    /// Advances by one resolution unit, keeping provenance and bound.
    pub fn advance(self, unit: ResolutionUnit) -> Result<Self, TimeError> {
        advance_by_resolution(self, unit)
    }
}

/// The smallest step the clock is allowed to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ResolutionUnit(u64);

impl ResolutionUnit {
    pub const NANOSECOND: ResolutionUnit = ResolutionUnit(1);

    pub fn new(nanos_per_tick: u64) -> Result<Self, TimeError> {
        if nanos_per_tick == 0 {
            return Err(TimeError::ZeroResolution);
        }
        Ok(Self(nanos_per_tick))
    }

    pub fn nanos_per_tick(self) -> u64 {
        self.0
    }
}

impl Default for ResolutionUnit {
    fn default() -> Self {
        Self::NANOSECOND
    }
}

const FRAC_BITS: u32 = 32;
const ONE: u64 = 1 << FRAC_BITS;
/// Lowest accepted rate, 0.5.
const MIN_RATE: u64 = ONE / 2;
/// Highest accepted rate, 2.0.
const MAX_RATE: u64 = ONE * 2;

/// Multiplier from raw counter ticks to corrected nanoseconds, Q32.32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DriftRate(u64);

impl DriftRate {
    pub const IDENTITY: DriftRate = DriftRate(ONE);

    /// Builds a rate from its raw Q32.32 representation, rejecting values
    /// outside [0.5, 2.0].
    pub fn from_raw(raw: u64) -> Result<Self, TimeError> {
        if !(MIN_RATE..=MAX_RATE).contains(&raw) {
            return Err(TimeError::ImplausibleRate(raw));
        }
        Ok(Self(raw))
    }

    /// `numerator / denominator`, rounded to nearest.
    pub fn from_ratio(numerator: u64, denominator: u64) -> Result<Self, TimeError> {
        if denominator == 0 {
            return Err(TimeError::ImplausibleRate(u64::MAX));
        }
        let scaled = (numerator as u128) << FRAC_BITS;
        let den = denominator as u128;
        let q = div_round_half_even(scaled, den);
        Self::from_raw(u64::try_from(q).unwrap_or(u64::MAX))
    }

    /// Parses a decimal ratio such as `0.97` or `1.02` exactly (up to eighteen
    /// fractional digits).
    pub fn from_decimal(text: &str) -> Result<Self, TimeError> {
        let (num, den) = parse_decimal(text).ok_or(TimeError::ImplausibleRate(0))?;
        Self::from_ratio(num, den)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / ONE as f64
    }

    /// The reciprocal rate. Fails if the reciprocal leaves the window, which
    /// cannot happen for rates inside it.
    pub fn inverse(self) -> Result<Self, TimeError> {
        let q = div_round_half_even(1u128 << (2 * FRAC_BITS), self.0 as u128);
        Self::from_raw(u64::try_from(q).unwrap_or(u64::MAX))
    }
}

impl Default for DriftRate {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for DriftRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}", self.as_f64())
    }
}

/// Parses `123.456` into (123456, 1000).
pub(crate) fn parse_decimal(text: &str) -> Option<(u64, u64)> {
    let text = text.trim();
    let (int_part, frac_part) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if frac_part.len() > 18 || (int_part.is_empty() && frac_part.is_empty()) {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    let den = 10u64.pow(frac_part.len() as u32);
    let int: u64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().ok()?
    };
    let frac: u64 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().ok()?
    };
    Some((int.checked_mul(den)?.checked_add(frac)?, den))
}

fn div_round_half_even(num: u128, den: u128) -> u128 {
    let q = num / den;
    let r = num % den;
    let twice = r * 2;
    if twice > den || (twice == den && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Measured round trip, optionally split into its two legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RttEstimate {
    pub rtt_nanos: u64,
    pub rtt1_nanos: Option<u64>,
    pub rtt2_nanos: Option<u64>,
}

impl RttEstimate {
    pub fn new(rtt_nanos: u64) -> Self {
        Self {
            rtt_nanos,
            rtt1_nanos: None,
            rtt2_nanos: None,
        }
    }

    /// Both legs known; the total is their sum.
    pub fn from_legs(first: u64, second: u64) -> Self {
        Self {
            rtt_nanos: first.saturating_add(second),
            rtt1_nanos: Some(first),
            rtt2_nanos: Some(second),
        }
    }

    /// Reading error under the symmetric-latency assumption.
    pub fn reading_error(&self) -> u64 {
        self.rtt_nanos / 2
    }
}

/// Time spent outside the protected execution context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct OffEnclaveInterval {
    pub delta_nanos: u64,
}

impl OffEnclaveInterval {
    pub fn new(delta_nanos: u64) -> Self {
        Self { delta_nanos }
    }
}

/// ε = Δ + RTT, saturating.
pub fn compute_error_bound(delta: OffEnclaveInterval, rtt: RttEstimate) -> u64 {
    delta.delta_nanos.saturating_add(rtt.rtt_nanos)
}

/// Moves a timestamp forward by exactly one resolution unit.
pub fn advance_by_resolution(
    ts: TrustedTimestamp,
    unit: ResolutionUnit,
) -> Result<TrustedTimestamp, TimeError> {
    let nanos = ts
        .nanos
        .checked_add(unit.0)
        .ok_or(TimeError::ClockExhausted {
            nanos: ts.nanos,
            step: unit.0,
        })?;
    Ok(TrustedTimestamp { nanos, ..ts })
}

/// `round(raw_ticks × rate)`, ties to even. Saturates at `u64::MAX`.
pub fn apply_drift(raw_ticks: u64, rate: DriftRate) -> u64 {
    let product = raw_ticks as u128 * rate.0 as u128;
    let q = div_round_half_even(product, 1u128 << FRAC_BITS);
    u64::try_from(q).unwrap_or(u64::MAX)
}

/// Inverse of [`apply_drift`]: `round(nanos / rate)`, ties to even.
pub fn remove_drift(nanos: u64, rate: DriftRate) -> u64 {
    let q = div_round_half_even((nanos as u128) << FRAC_BITS, rate.0 as u128);
    u64::try_from(q).unwrap_or(u64::MAX)
}
