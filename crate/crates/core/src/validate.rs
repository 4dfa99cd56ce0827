//! Holdout validation: refit without the last days, forecast them, and score
//! the agreement between forecasts and observations per horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{forecast_panel, ForecastTable};
use crate::ingest::CasePanel;
use crate::sampler::{fit_mcmc, McmcConfig, PosteriorDraws};

/// Pearson correlation, bias correction factor and their product.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub pearson: f64,
    pub accuracy: f64,
    pub ccc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub pearson: f64,
    pub accuracy: f64,
    pub ccc: f64,
}

impl HorizonMetrics {
    pub fn new(horizon: usize, a: Agreement) -> Self {
        Self {
            horizon,
            pearson: a.pearson,
            accuracy: a.accuracy,
            ccc: a.ccc,
        }
    }
}

/// Lin's concordance correlation of forecasts `x` against observations `y`.
///
/// Moments use `1/n`. `accuracy` is `C_b = 2 / (v + 1/v + u^2)` with
/// `v = s_x / s_y` and `u = (m_x - m_y) / sqrt(s_x s_y)` (SDs, not variances),
/// so that `ccc = pearson * accuracy`.
pub fn ccc_components(x: &[f64], y: &[f64]) -> Result<Agreement> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} forecasts against {} observations",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "agreement needs at least 2 pairs, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    if vx == 0.0 {
        return Err(Error::DegenerateVariance("forecast vector"));
    }
    if vy == 0.0 {
        return Err(Error::DegenerateVariance("observation vector"));
    }
    let (sx, sy) = (vx.sqrt(), vy.sqrt());
    let pearson = (cov / (sx * sy)).clamp(-1.0, 1.0);
    let v = sx / sy;
    let u = (mx - my) / (sx * sy).sqrt();
    let accuracy = 2.0 / (v + v.recip() + u * u);
    let ccc = 2.0 * cov / (vx + vy + (mx - my).powi(2));
    Ok(Agreement {
        pearson,
        accuracy,
        ccc,
    })
}

/// One forecast/observation pair, both on the `ln(1 + y)` scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPair {
    pub country_id: String,
    pub horizon: usize,
    pub log1p_observed: f64,
    pub log1p_forecast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub metrics: Vec<HorizonMetrics>,
    pub pairs: Vec<HoldoutPair>,
    pub forecasts: ForecastTable,
}

impl HoldoutReport {
    /// `horizon,r,accuracy,ccc`
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["horizon", "r", "accuracy", "ccc"])?;
        for m in &self.metrics {
            w.write_record([
                m.horizon.to_string(),
                m.pearson.to_string(),
                m.accuracy.to_string(),
                m.ccc.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// `country_id,horizon,log1p_observed,log1p_forecast`
    pub fn pairs_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// Split `panel` into the fitting part and the last `horizon` days.
pub fn holdout_split(panel: &CasePanel, horizon: usize) -> Result<CasePanel> {
    if horizon < 1 {
        return Err(Error::Domain("holdout horizon must be at least 1".into()));
    }
    if horizon + 2 >= panel.n_days() {
        return Err(Error::InsufficientData(format!(
            "holdout of {horizon} days needs more than {} days, panel has {}",
            horizon + 2,
            panel.n_days()
        )));
    }
    panel.truncate_last(horizon)
}

/// Fit on all but the last `horizon` days, forecast them and score each horizon.
pub fn holdout_evaluate(panel: &CasePanel, config: &McmcConfig, horizon: usize) -> Result<HoldoutReport> {
    let train = holdout_split(panel, horizon)?;
    let draws = fit_mcmc(&train, config)?;
    score_holdout(panel, &train, &draws, horizon)
}

/// Score forecasts from `draws`, fitted on `train`, against the days of `panel` after it.
pub fn score_holdout(
    panel: &CasePanel,
    train: &CasePanel,
    draws: &PosteriorDraws,
    horizon: usize,
) -> Result<HoldoutReport> {
    if train.n_days() + horizon != panel.n_days() || train.countries() != panel.countries() {
        return Err(Error::Dimension(format!(
            "training panel of {} days plus {horizon} does not match {} days",
            train.n_days(),
            panel.n_days()
        )));
    }
    let forecasts = forecast_panel(draws, train, &draws.basis()?, horizon)?;
    let mut metrics = Vec::with_capacity(horizon);
    let mut pairs = Vec::with_capacity(horizon * panel.n_countries());
    for h in 1..=horizon {
        let t = train.n_days() + h - 1;
        let mut x = Vec::with_capacity(panel.n_countries());
        let mut y = Vec::with_capacity(panel.n_countries());
        for (i, id) in panel.countries().iter().enumerate() {
            let row = forecasts
                .get(id, h)
                .ok_or_else(|| Error::State(format!("no forecast for {id} at horizon {h}")))?;
            let observed = panel.get(i, t);
            x.push(row.median as f64);
            y.push(observed as f64);
            pairs.push(HoldoutPair {
                country_id: id.clone(),
                horizon: h,
                log1p_observed: (observed as f64).ln_1p(),
                log1p_forecast: (row.median as f64).ln_1p(),
            });
        }
        metrics.push(HorizonMetrics::new(h, ccc_components(&x, &y)?));
    }
    pairs.sort_by_key(|p| (panel.country_index(&p.country_id), p.horizon));
    Ok(HoldoutReport {
        metrics,
        pairs,
        forecasts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn perfect_agreement() {
        let a = ccc_components(&[1.0, 5.0, 9.0], &[1.0, 5.0, 9.0]).unwrap();
        assert!(close(a.pearson, 1.0) && close(a.accuracy, 1.0) && close(a.ccc, 1.0));
    }

    // 1/n moments: variances 2/3, covariance 2/3, mean shift 1 -> 2(2/3)/(4/3 + 1) = 4/7.
    #[test]
    fn shifted_line() {
        let a = ccc_components(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!(close(a.pearson, 1.0));
        assert!(close(a.ccc, 4.0 / 7.0));
        assert!(close(a.accuracy, 4.0 / 7.0));
    }

    #[test]
    fn reversed() {
        let a = ccc_components(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!(close(a.pearson, -1.0) && close(a.ccc, -1.0));
    }

    #[test]
    fn constant_vector_is_degenerate() {
        assert!(matches!(
            ccc_components(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(matches!(
            ccc_components(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(ccc_components(&[1.0], &[1.0]).is_err());
        assert!(ccc_components(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn scale_changes_agreement_not_correlation() {
        let x = [1.0, 4.0, 2.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = ccc_components(&x, &y).unwrap();
        assert!(close(a.pearson, 1.0));
        assert!(a.ccc < 1.0);
    }

    #[test]
    fn holdout_preconditions() {
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let panel = CasePanel::new(vec!["A".into()], start, vec![vec![1; 9]]).unwrap();
        let config = McmcConfig::default();
        assert!(matches!(holdout_evaluate(&panel, &config, 0), Err(Error::Domain(_))));
        assert!(matches!(
            holdout_evaluate(&panel, &config, 7),
            Err(Error::InsufficientData(_))
        ));
        assert_eq!(holdout_split(&panel, 6).unwrap().n_days(), 3);
    }

    proptest! {
        #[test]
        fn identity_and_symmetry(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
            let a = ccc_components(&x, &y).unwrap();
            let b = ccc_components(&y, &x).unwrap();
            prop_assert!((a.ccc - a.pearson * a.accuracy).abs() < 1e-12);
            prop_assert!(a.ccc.abs() <= 1.0 + 1e-12);
            prop_assert!(a.accuracy > 0.0 && a.accuracy <= 1.0 + 1e-12);
            prop_assert!((a.ccc - b.ccc).abs() < 1e-12);
            prop_assert!((a.pearson - b.pearson).abs() < 1e-12);
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        }
    }
}
