use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::dichotomy::{auto_eta, check_gap_condition};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub alpha: f64,
    pub beta: f64,
    pub bound_k: f64,
    pub lipschitz: f64,
    pub eta: f64,
    pub value: f64,
    pub satisfied: bool,
    pub margin: f64,
}

/// Dichotomy constants, Lipschitz bound, chosen `eta` and the gap value.
pub fn cmd_gap(cfg: &RunConfig) -> Result<GapSummary> {
    let model = cfg.build_model()?;
    let split = model.split();
    let eta = cfg.eta.value().unwrap_or_else(|| auto_eta(split));
    let report = check_gap_condition(split, model.lipschitz(), eta)?;
    Ok(GapSummary {
        alpha: split.alpha(),
        beta: split.beta(),
        bound_k: split.bound_k(),
        lipschitz: model.lipschitz(),
        eta,
        value: report.value,
        satisfied: report.satisfied,
        margin: report.margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::EtaPolicy;

    #[test]
    fn example1_arithmetic() {
        // the cut-off quadratic has L_F = 11.5 rho
        let cfg = RunConfig {
            cutoff: Some(0.4 / 11.5),
            ..Default::default()
        };
        let g = cmd_gap(&cfg).unwrap();
        assert!((g.value - 0.8).abs() < 1e-9 && g.satisfied);
        let cfg = RunConfig {
            lipschitz: Some(0.6),
            ..Default::default()
        };
        let g = cmd_gap(&cfg).unwrap();
        assert!((g.value - 1.2).abs() < 1e-9 && !g.satisfied);
        let cfg = RunConfig {
            model: "zero".into(),
            ..Default::default()
        };
        assert_eq!(cmd_gap(&cfg).unwrap().value, 0.0);
        let cfg = RunConfig {
            eta: EtaPolicy::Value(3.0),
            ..Default::default()
        };
        assert!(cmd_gap(&cfg).is_err());
    }
}
