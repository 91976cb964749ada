use super::{AcceptanceCurve, AnalyticsError};
use crate::config::AuxDrafterPoint;

/// Accepted draft tokens per cycle when an auxiliary drafter proposes
/// `d_e − 1` extra tokens at each outer position:
/// `γ·x·[1 + γ_e·(d_e − 1)]`.
pub fn composed_accept_length(x: u32, gamma: f64, d_e: u32, gamma_e: f64) -> f64 {
    gamma * x as f64 * (1.0 + gamma_e * (d_e as f64 - 1.0))
}

/// `γ_e(d_e)` from an auxiliary drafter table; `d_e = 1` needs no entry.
pub fn aux_gamma(points: &[AuxDrafterPoint], d_e: u32) -> Result<f64, AnalyticsError> {
    if d_e == 1 {
        return Ok(points.iter().find(|p| p.d_e == 1).map_or(1.0, |p| p.gamma_e));
    }
    points
        .iter()
        .find(|p| p.d_e == d_e)
        .map(|p| p.gamma_e)
        .ok_or_else(|| AnalyticsError::Invalid(format!("no aux_drafter entry for d_e={d_e}")))
}

/// [`composed_accept_length`] with `γ` from an acceptance curve and `γ_e`
/// from an auxiliary drafter table.
pub fn composed_accept_length_with<G: AcceptanceCurve + ?Sized>(
    x: u32,
    c: f64,
    d_e: u32,
    gamma: &G,
    aux: &[AuxDrafterPoint],
) -> Result<f64, AnalyticsError> {
    if d_e == 0 {
        return Err(AnalyticsError::Invalid("d_e must be >= 1".into()));
    }
    Ok(composed_accept_length(x, gamma.gamma(x, c)?, d_e, aux_gamma(aux, d_e)?))
}
