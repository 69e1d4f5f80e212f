use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Integrality slack when checking that `Nμ` and `Nμν` are whole dollars.
const INTEGRALITY_SLACK: f64 = 1e-9;

/// Experiment parameters: number of agents, dollars per agent, the
/// bank-to-agents wealth ratio and the exchange rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n_agents: usize,
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
}

impl ModelParams {
    /// Validates the real-valued constraints. The integrality of `Nμ` and
    /// `Nμν` is only required by the agent-based simulator and is checked by
    /// [`ModelParams::total_money`] and [`ModelParams::bank_reserve`].
    pub fn new(n_agents: usize, mu: f64, nu: f64, lambda: f64) -> Result<Self> {
        let p = Self {
            n_agents,
            mu,
            nu,
            lambda,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(invalid("n-agents", "must be a positive integer"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(invalid("mu", format!("must be > 0, got {}", self.mu)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(invalid("nu", format!("must be >= 0, got {}", self.nu)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(
                "lambda",
                format!("must be > 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }

    /// Total agent-side money `Nμ`, which must be a positive integer.
    pub fn total_money(&self) -> Result<i64> {
        let total = self.n_agents as f64 * self.mu;
        let rounded = total.round();
        if (total - rounded).abs() > INTEGRALITY_SLACK || rounded < 1.0 {
            return Err(invalid(
                "mu",
                format!("N*mu = {total} must be a positive integer"),
            ));
        }
        Ok(rounded as i64)
    }

    /// Initial bank cash `B_* = Nμν`, which must be a non-negative integer.
    pub fn bank_reserve(&self) -> Result<i64> {
        let total = self.n_agents as f64 * self.mu * self.nu;
        let rounded = total.round();
        if (total - rounded).abs() > INTEGRALITY_SLACK * self.n_agents as f64 {
            return Err(invalid(
                "nu",
                format!("N*mu*nu = {total} must be a non-negative integer"),
            ));
        }
        Ok(rounded as i64)
    }

    /// Average debt per agent at which the bank runs out of cash.
    pub fn debt_limit(&self) -> f64 {
        self.mu * self.nu
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrality() {
        let p = ModelParams::new(4, 10.0, 0.5, 1.0).unwrap();
        assert_eq!(p.total_money().unwrap(), 40);
        assert_eq!(p.bank_reserve().unwrap(), 20);
        let p = ModelParams::new(10_000, 10.0, 0.4, 1.0).unwrap();
        assert_eq!(p.bank_reserve().unwrap(), 40_000);
        let p = ModelParams::new(3, 0.5, 0.0, 1.0).unwrap();
        assert!(p.total_money().is_err());
        let p = ModelParams::new(3, 1.0, 0.5, 1.0).unwrap();
        assert!(p.bank_reserve().is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(ModelParams::new(0, 1.0, 0.0, 1.0).is_err());
        assert!(ModelParams::new(2, 0.0, 0.0, 1.0).is_err());
        let err = ModelParams::new(2, 1.0, -1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("`nu`"));
        assert!(ModelParams::new(2, 1.0, 0.0, 0.0).is_err());
    }
}
