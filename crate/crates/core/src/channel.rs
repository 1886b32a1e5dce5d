//! Single-client uplink: NLoS path loss, log-normal shadowing, Rayleigh
//! fading, Shannon rate and the resulting per-window token budget.

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub f_c_ghz: f64,
    pub d_c_m: f64,
    pub bandwidth_hz: f64,
    pub p_dbm: f64,
    pub n0_dbm_hz: f64,
    pub sigma_db: f64,
    pub t_ul_s: f64,
    /// Payload per token, `d * bits_per_value`.
    pub b_token: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            f_c_ghz: 2.4,
            d_c_m: 100.0,
            bandwidth_hz: 10e6,
            p_dbm: 23.0,
            n0_dbm_hz: -174.0,
            sigma_db: 7.8,
            t_ul_s: 0.1,
            b_token: 64.0 * 16.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("f_c_ghz", self.f_c_ghz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("t_ul_s", self.t_ul_s),
            ("b_token", self.b_token),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.d_c_m >= 1.0 && self.d_c_m.is_finite()) {
            return Err(Error::Domain(format!("d_c_m must be at least 1, got {}", self.d_c_m)));
        }
        if !(self.sigma_db >= 0.0) {
            return Err(Error::Domain(format!("sigma_db must be nonnegative, got {}", self.sigma_db)));
        }
        if !self.p_dbm.is_finite() || !self.n0_dbm_hz.is_finite() {
            return Err(Error::Domain("power levels must be finite".into()));
        }
        Ok(())
    }

    pub fn with_distance(&self, d_c_m: f64) -> Self {
        Self {
            d_c_m,
            ..self.clone()
        }
    }
}

/// One uplink draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRealization {
    pub pl_db: f64,
    pub psi: f64,
    pub chi: f64,
    pub h_ul: f64,
    pub snr: f64,
    pub rate_bps: f64,
    pub m_ul: u64,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `32.4 + 20 log10(f_c[GHz]) + 30 log10(d_c[m])`.
pub fn path_loss(f_c_ghz: f64, d_c_m: f64) -> Result<f64> {
    if !(f_c_ghz > 0.0) || !(d_c_m >= 1.0) {
        return Err(Error::Domain(format!(
            "path loss needs f_c > 0 and d_c >= 1, got f_c={f_c_ghz}, d_c={d_c_m}"
        )));
    }
    Ok(32.4 + 20.0 * f_c_ghz.log10() + 30.0 * d_c_m.log10())
}

/// Linear shadowing factor `10^(ξ/10)`, `ξ ~ N(0, σ²)`.
pub fn sample_shadowing(rng: &mut RngStream, sigma_db: f64) -> f64 {
    db_to_linear(sigma_db * rng.gaussian())
}

/// Rayleigh power `|η|²` with `η ~ CN(0, 1)`.
pub fn sample_fading(rng: &mut RngStream) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let a = s * rng.gaussian();
    let b = s * rng.gaussian();
    a * a + b * b
}

pub fn channel_gain(pl_db: f64, psi: f64, chi: f64) -> f64 {
    db_to_linear(-pl_db) * psi * chi
}

/// Linear SNR with power and noise density converted from dBm to mW.
pub fn snr(h_ul: f64, params: &ChannelParams) -> f64 {
    db_to_linear(params.p_dbm) * h_ul / (db_to_linear(params.n0_dbm_hz) * params.bandwidth_hz)
}

pub fn rate(snr: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * (1.0 + snr).log2()
}

/// Whole tokens that fit in one uplink window.
pub fn token_budget(rate_bps: f64, t_ul_s: f64, b_token: f64) -> u64 {
    let m = (t_ul_s * rate_bps / b_token).floor();
    if m.is_finite() && m > 0.0 {
        m as u64
    } else {
        0
    }
}

/// Realization for given shadowing and fading values.
pub fn realize(params: &ChannelParams, psi: f64, chi: f64) -> Result<ChannelRealization> {
    let pl_db = path_loss(params.f_c_ghz, params.d_c_m)?;
    let h_ul = channel_gain(pl_db, psi, chi);
    let snr = snr(h_ul, params);
    let rate_bps = rate(snr, params.bandwidth_hz);
    Ok(ChannelRealization {
        pl_db,
        psi,
        chi,
        h_ul,
        snr,
        rate_bps,
        m_ul: token_budget(rate_bps, params.t_ul_s, params.b_token),
    })
}

pub fn draw_realization(params: &ChannelParams, rng: &mut RngStream) -> Result<ChannelRealization> {
    params.validate()?;
    let psi = sample_shadowing(rng, params.sigma_db);
    let chi = sample_fading(rng);
    realize(params, psi, chi)
}

/// Median token budget over `draws` realizations (lower median for even counts).
pub fn median_budget(params: &ChannelParams, rng: &mut RngStream, draws: usize) -> Result<u64> {
    if draws == 0 {
        return Err(Error::Domain("median over zero draws".into()));
    }
    let mut m = (0..draws)
        .map(|_| draw_realization(params, rng).map(|r| r.m_ul))
        .collect::<Result<Vec<_>>>()?;
    m.sort_unstable();
    Ok(m[(draws - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn path_loss_cases() {
        assert_relative_eq!(path_loss(1.0, 1.0).unwrap(), 32.4, epsilon = 1e-12);
        let expected = 32.4 + 20.0 * 2.4f64.log10() + 60.0;
        assert_relative_eq!(path_loss(2.4, 100.0).unwrap(), expected, epsilon = 1e-12);
        assert!((path_loss(2.4, 100.0).unwrap() - 100.004).abs() < 1e-3);
        for f in [0.9, 2.4, 28.0] {
            let step = path_loss(f, 200.0).unwrap() - path_loss(f, 100.0).unwrap();
            assert_relative_eq!(step, 30.0 * 2f64.log10(), epsilon = 1e-9);
        }
        assert!(path_loss(0.0, 10.0).is_err());
        assert!(path_loss(2.4, 0.5).is_err());
    }

    #[test]
    fn gain_snr_rate_budget_cases() {
        assert_eq!(channel_gain(0.0, 1.0, 1.0), 1.0);
        assert_relative_eq!(channel_gain(100.004, 1.0, 1.0), 9.99e-11, max_relative = 1e-3);
        assert_relative_eq!(channel_gain(90.0, 1.0, 2.0), 2.0 * channel_gain(90.0, 1.0, 1.0));

        let p = ChannelParams::default();
        assert_eq!(snr(0.0, &p), 0.0);
        let half = ChannelParams {
            bandwidth_hz: p.bandwidth_hz / 2.0,
            ..p.clone()
        };
        assert_relative_eq!(snr(1e-10, &half), 2.0 * snr(1e-10, &p), max_relative = 1e-12);

        assert_eq!(rate(0.0, 1e7), 0.0);
        assert_relative_eq!(rate(1.0, 1e7), 1e7);
        assert_relative_eq!(rate(500.7, 1e7), 8.97e7, max_relative = 1e-3);

        assert_eq!(token_budget(1000.0, 1.0, 300.0), 3);
        // 8.97e7 is the rounded chain rate (8.9707e7); floor lands one below.
        assert_eq!(token_budget(8.97e7, 0.1, 1024.0), 8759);
        assert_eq!(token_budget(8.9707e7, 0.1, 1024.0), 8760);
        assert_eq!(token_budget(1000.0, 0.1, 1024.0), 0);
    }

    #[test]
    fn hand_chain_at_reference_distance() {
        let r = realize(&ChannelParams::default(), 1.0, 1.0).unwrap();
        assert!((r.pl_db - 100.004).abs() < 1e-3);
        assert!((linear_to_db(r.snr) - 27.0).abs() < 0.05);
        assert_relative_eq!(r.snr, 500.7, max_relative = 1e-3);
        assert_eq!(r.m_ul, 8760);
    }

    #[test]
    fn db_domain_agrees_with_linear() {
        let p = ChannelParams::default();
        let r = realize(&p, 1.7, 0.3).unwrap();
        let snr_db = p.p_dbm - r.pl_db + linear_to_db(1.7) + linear_to_db(0.3) - p.n0_dbm_hz - linear_to_db(p.bandwidth_hz);
        assert_relative_eq!(db_to_linear(snr_db), r.snr, max_relative = 1e-9);
    }

    #[test]
    fn zero_sigma_means_unit_shadowing() {
        let mut rng = RngStream::new(3, "shadowing");
        for _ in 0..100 {
            assert_eq!(sample_shadowing(&mut rng, 0.0), 1.0);
        }
    }

    #[test]
    fn same_seed_same_realization() {
        let p = ChannelParams::default();
        let a = draw_realization(&p, &mut RngStream::new(5, "channel")).unwrap();
        let b = draw_realization(&p, &mut RngStream::new(5, "channel")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validate_rejects_bad_params() {
        let p = ChannelParams::default();
        assert!(p.validate().is_ok());
        assert!(p.with_distance(0.5).validate().is_err());
        assert!(ChannelParams { b_token: 0.0, ..p.clone() }.validate().is_err());
        assert!(ChannelParams { sigma_db: -1.0, ..p }.validate().is_err());
    }
}
