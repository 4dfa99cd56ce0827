//! Convergence diagnostics and posterior summaries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Potential scale reduction factor of Gelman and Rubin.
///
/// `R = sqrt(((n-1)/n W + B/n) / W)` with `W` the mean within-chain variance
/// and `B` `n` times the variance of the chain means (both with `n-1`/`m-1`
/// denominators). Returns 1 when every draw is identical.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Dimension(format!(
            "need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Dimension("chains have unequal lengths".into()));
    }
    if n < 2 {
        return Err(Error::Dimension("chains need at least 2 draws".into()));
    }
    let m = chains.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let within = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    let grand = means.iter().sum::<f64>() / m;
    let between = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if within == 0.0 {
        return Ok(if between == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((((nf - 1.0) / nf * within + between / nf) / within).sqrt())
}

/// Empirical quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

/// Scalar model parameter selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Param {
    Beta(usize),
    SigmaEta,
    SigmaB(usize),
    Pi,
    SigmaOmega,
    Psi,
}

impl Param {
    /// Every scalar of a model with `terms = Q + 1` polynomial terms.
    pub fn all(terms: usize) -> Vec<Param> {
        let mut out: Vec<Param> = (0..terms).map(Param::Beta).collect();
        out.extend((0..terms).map(Param::SigmaB));
        out.extend([Param::SigmaEta, Param::Pi, Param::SigmaOmega, Param::Psi]);
        out
    }

    pub fn get(&self, p: &ModelParams) -> Result<f64> {
        let oob = || Error::Lookup(self.to_string());
        Ok(match *self {
            Param::Beta(q) => *p.beta.get(q).ok_or_else(oob)?,
            Param::SigmaB(q) => *p.sigma_b.get(q).ok_or_else(oob)?,
            Param::SigmaEta => p.sigma_eta,
            Param::Pi => p.pi_outlier,
            Param::SigmaOmega => p.sigma_omega,
            Param::Psi => p.psi,
        })
    }

    /// Short label for tables, e.g. `β0` or `σ_η`.
    pub fn symbol(&self) -> String {
        match self {
            Param::Beta(q) => format!("β{q}"),
            Param::SigmaB(q) => format!("σ_b{q}"),
            Param::SigmaEta => "σ_η".into(),
            Param::Pi => "π".into(),
            Param::SigmaOmega => "σ_ω".into(),
            Param::Psi => "ψ".into(),
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Beta(q) => write!(f, "beta{q}"),
            Param::SigmaB(q) => write!(f, "sigma_b{q}"),
            Param::SigmaEta => f.write_str("sigma_eta"),
            Param::Pi => f.write_str("pi"),
            Param::SigmaOmega => f.write_str("sigma_omega"),
            Param::Psi => f.write_str("psi"),
        }
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let indexed = |prefix: &str| -> Option<usize> { s.strip_prefix(prefix)?.parse().ok() };
        match s {
            "sigma_eta" => Ok(Param::SigmaEta),
            "pi" => Ok(Param::Pi),
            "sigma_omega" => Ok(Param::SigmaOmega),
            "psi" => Ok(Param::Psi),
            _ => indexed("sigma_b")
                .map(Param::SigmaB)
                .or_else(|| indexed("beta").map(Param::Beta))
                .ok_or_else(|| Error::Lookup(s.to_string())),
        }
    }
}

/// Posterior mean and equal-tailed 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "summaries need at least 2 draws, got {}",
                values.len()
            )));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            ci_low: quantile_sorted(&sorted, 0.025),
            ci_high: quantile_sorted(&sorted, 0.975),
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    /// `β0 0.9993 [0.9974, 1.0012]`
    pub fn render(&self, label: &str) -> String {
        format!(
            "{label} {:.4} [{:.4}, {:.4}]",
            self.mean, self.ci_low, self.ci_high
        )
    }
}
