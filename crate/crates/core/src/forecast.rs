//! Posterior-predictive forecasts beyond the end of the panel.

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CasePanel;
use crate::model::{normal, phi_unchecked, sample_nb};
use crate::polybasis::OrthoBasis;
use crate::sampler::{quantile_sorted, Draw, PosteriorDraws};

pub const DEFAULT_HORIZON: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastOptions {
    pub horizon: usize,
    /// Simulate the outlier term. When off, forecasts follow the latent trend only.
    pub include_outliers: bool,
    pub seed: u64,
}

impl ForecastOptions {
    /// Options for `horizon` days with outliers on and the seed the draws were fitted with.
    pub fn for_draws(draws: &PosteriorDraws, horizon: usize) -> Self {
        Self {
            horizon,
            include_outliers: true,
            seed: draws.config.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub country_id: String,
    pub date: NaiveDate,
    pub horizon: usize,
    pub median: u64,
    pub lo95: u64,
    pub hi95: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastTable {
    pub horizon: usize,
    /// Grouped by country in panel order, then by horizon.
    pub rows: Vec<ForecastRow>,
}

impl ForecastTable {
    pub fn get(&self, country_id: &str, horizon: usize) -> Option<&ForecastRow> {
        self.rows
            .iter()
            .find(|r| r.country_id == country_id && r.horizon == horizon)
    }

    pub fn countries(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.country_id.as_str()) {
                out.push(&r.country_id);
            }
        }
        out
    }

    /// `country_id,date,horizon,median,lo95,hi95`
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let rows: Vec<ForecastRow> = csv::Reader::from_reader(bytes)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        let horizon = rows.iter().map(|r| r.horizon).max().unwrap_or(0);
        Ok(Self { horizon, rows })
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// Forecast `horizon` days past the panel, outliers included.
pub fn forecast_panel(
    draws: &PosteriorDraws,
    panel: &CasePanel,
    basis: &OrthoBasis,
    horizon: usize,
) -> Result<ForecastTable> {
    forecast_panel_with(draws, panel, basis, &ForecastOptions::for_draws(draws, horizon))
}

pub fn forecast_panel_with(
    draws: &PosteriorDraws,
    panel: &CasePanel,
    basis: &OrthoBasis,
    options: &ForecastOptions,
) -> Result<ForecastTable> {
    let paths = simulate_paths(draws, panel, basis, options)?;
    let end = panel.end();
    let mut rows = Vec::with_capacity(panel.n_countries() * options.horizon);
    for (i, country_paths) in paths.iter().enumerate() {
        for h in 1..=options.horizon {
            let mut values: Vec<f64> = country_paths.iter().map(|p| p[h - 1] as f64).collect();
            values.sort_by(f64::total_cmp);
            let q = |p: f64| quantile_sorted(&values, p).round() as u64;
            rows.push(ForecastRow {
                country_id: panel.countries()[i].clone(),
                date: end + Duration::days(h as i64),
                horizon: h,
                median: q(0.5),
                lo95: q(0.025),
                hi95: q(0.975),
            });
        }
    }
    Ok(ForecastTable {
        horizon: options.horizon,
        rows,
    })
}

/// Simulated count paths, indexed `[country][draw][h - 1]`, draws pooled in chain order.
pub fn simulate_paths(
    draws: &PosteriorDraws,
    panel: &CasePanel,
    basis: &OrthoBasis,
    options: &ForecastOptions,
) -> Result<Vec<Vec<Vec<u64>>>> {
    if options.horizon < 1 {
        return Err(Error::Domain("forecast horizon must be at least 1".into()));
    }
    if draws.n_retained() == 0 {
        return Err(Error::State("no retained posterior draws".into()));
    }
    draws.check_panel(panel)?;
    if basis.t_count() != draws.t_count || basis.n_terms() != draws.n_terms() {
        return Err(Error::Dimension(format!(
            "basis is {} days x {} terms, draws {} x {}",
            basis.t_count(),
            basis.n_terms(),
            draws.t_count,
            draws.n_terms()
        )));
    }
    let future: Vec<Vec<f64>> = (1..=options.horizon)
        .map(|h| basis.evaluate_beyond(basis.t_count() + h))
        .collect::<Result<_>>()?;
    let pooled: Vec<&Draw> = draws.pooled().collect();
    let n = panel.n_countries();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            pooled
                .iter()
                .enumerate()
                .map(|(d, draw)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
                    rng.set_stream((d * n + i) as u64);
                    simulate_one(&mut rng, draw, i, &future, options.include_outliers)
                })
                .collect()
        })
        .collect())
}

fn simulate_one(
    rng: &mut ChaCha8Rng,
    draw: &Draw,
    i: usize,
    future: &[Vec<f64>],
    include_outliers: bool,
) -> Vec<u64> {
    let p = &draw.params;
    let mut gamma = draw.gamma_last[i];
    future
        .iter()
        .map(|row| {
            let phi = phi_unchecked(&p.beta, draw.b.row(i), row);
            gamma = phi * gamma + normal(rng, 0.0, p.sigma_eta);
            let mut log_mu = gamma;
            if include_outliers {
                let outlier = rand::Rng::random::<f64>(rng) < p.pi_outlier;
                let omega = normal(rng, 0.0, p.sigma_omega);
                if outlier {
                    log_mu += omega;
                }
            }
            sample_nb(rng, log_mu.exp(), p.psi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Grid, ModelParams};
    use crate::polybasis::build_orthogonal_basis;
    use crate::sampler::{AcceptanceLedger, ChainDraws, LatentSummary, McmcConfig, Priors};

    fn panel(n: usize, t: usize) -> CasePanel {
        let ids = (0..n).map(|i| format!("K{i}")).collect();
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        CasePanel::new(ids, start, vec![vec![10; t]; n]).unwrap()
    }

    fn draws_for(panel: &CasePanel, degree: usize, params: ModelParams, gamma_last: f64, count: usize) -> PosteriorDraws {
        let (n, t) = (panel.n_countries(), panel.n_days());
        let draw = Draw {
            iteration: 0,
            params,
            b: Grid::filled(n, degree + 1, 0.0),
            gamma_last: vec![gamma_last; n],
            log_posterior: 0.0,
            state: None,
        };
        PosteriorDraws {
            config: McmcConfig {
                degree,
                ..McmcConfig::default()
            },
            priors: Priors::default(),
            country_ids: panel.countries().to_vec(),
            t_count: t,
            panel_hash: panel.content_hash(),
            chains: vec![ChainDraws {
                draws: vec![draw; count],
                acceptance: AcceptanceLedger::default(),
                trace: vec![],
            }],
            latent: LatentSummary {
                n_draws: 0,
                gamma_mean: Grid::filled(n, t, 0.0),
                gamma_sd: Grid::filled(n, t, 0.0),
                lambda_mean: Grid::filled(n, t, 0.0),
            },
        }
    }

    fn degenerate() -> ModelParams {
        ModelParams {
            beta: vec![1.0],
            sigma_eta: 0.0,
            sigma_b: vec![0.0],
            pi_outlier: 0.0,
            sigma_omega: 0.0,
            psi: 1e-8,
        }
    }

    // Poisson(10): P(Y <= 9) = 0.4579, P(Y <= 10) = 0.5830 by direct summation.
    #[test]
    fn poisson_limit_median_is_ten() {
        let mut cdf = 0.0;
        let mut pmf = (-10.0f64).exp();
        let mut median = None;
        for y in 0..100u64 {
            if y > 0 {
                pmf *= 10.0 / y as f64;
            }
            cdf += pmf;
            if median.is_none() && cdf >= 0.5 {
                median = Some(y);
            }
        }
        assert_eq!(median, Some(10));

        let p = panel(3, 20);
        let basis = build_orthogonal_basis(20, 0).unwrap();
        let draws = draws_for(&p, 0, degenerate(), 10f64.ln(), 2001);
        let table = forecast_panel(&draws, &p, &basis, 7).unwrap();
        assert_eq!(table.rows.len(), 21);
        assert!(table.rows.iter().all(|r| r.median == 10), "{:?}", table.rows);
    }

    #[test]
    fn single_draw_median_is_the_path() {
        let p = panel(2, 15);
        let basis = build_orthogonal_basis(15, 1).unwrap();
        let params = ModelParams {
            beta: vec![1.0, 0.05],
            sigma_eta: 0.3,
            sigma_b: vec![0.1, 0.1],
            pi_outlier: 0.2,
            sigma_omega: 1.0,
            psi: 0.1,
        };
        let draws = draws_for(&p, 1, params, 3.0, 1);
        let options = ForecastOptions::for_draws(&draws, 5);
        let paths = simulate_paths(&draws, &p, &basis, &options).unwrap();
        let table = forecast_panel_with(&draws, &p, &basis, &options).unwrap();
        for (i, id) in p.countries().iter().enumerate() {
            for h in 1..=5 {
                let row = table.get(id, h).unwrap();
                let v = paths[i][0][h - 1];
                assert_eq!((row.lo95, row.median, row.hi95), (v, v, v));
            }
        }
    }

    #[test]
    fn dates_follow_panel_end() {
        let p = panel(1, 10);
        let basis = build_orthogonal_basis(10, 0).unwrap();
        let draws = draws_for(&p, 0, degenerate(), 1.0, 3);
        let table = forecast_panel(&draws, &p, &basis, DEFAULT_HORIZON).unwrap();
        assert_eq!(table.rows.len(), 7);
        assert_eq!(table.rows[0].date, p.end() + Duration::days(1));
        assert_eq!(table.rows[6].date, p.end() + Duration::days(7));
    }

    #[test]
    fn errors() {
        let p = panel(1, 10);
        let basis = build_orthogonal_basis(10, 0).unwrap();
        let draws = draws_for(&p, 0, degenerate(), 1.0, 3);
        assert!(matches!(forecast_panel(&draws, &p, &basis, 0), Err(Error::Domain(_))));
        let empty = draws_for(&p, 0, degenerate(), 1.0, 0);
        assert!(matches!(forecast_panel(&empty, &p, &basis, 3), Err(Error::State(_))));
        let other = panel(2, 10);
        assert!(matches!(forecast_panel(&draws, &other, &basis, 3), Err(Error::State(_))));
    }

    #[test]
    fn csv_round_trip_and_header() {
        let p = panel(2, 10);
        let basis = build_orthogonal_basis(10, 0).unwrap();
        let draws = draws_for(&p, 0, degenerate(), 2.0, 5);
        let table = forecast_panel(&draws, &p, &basis, 3).unwrap();
        let bytes = table.to_csv().unwrap();
        assert!(bytes.starts_with(b"country_id,date,horizon,median,lo95,hi95\n"));
        assert_eq!(ForecastTable::from_csv(&bytes).unwrap(), table);
    }

    #[test]
    fn deterministic_and_ordered() {
        let p = panel(3, 30);
        let basis = build_orthogonal_basis(30, 2).unwrap();
        let params = ModelParams {
            beta: vec![1.0, 0.0, 0.0],
            sigma_eta: 0.4,
            sigma_b: vec![0.1; 3],
            pi_outlier: 0.1,
            sigma_omega: 2.0,
            psi: 0.05,
        };
        let draws = draws_for(&p, 2, params, 5.0, 400);
        let a = forecast_panel(&draws, &p, &basis, 7).unwrap();
        let b = forecast_panel(&draws, &p, &basis, 7).unwrap();
        assert_eq!(a, b);
        for r in &a.rows {
            assert!(r.lo95 <= r.median && r.median <= r.hi95);
        }
        let width = |h| a.rows.iter().filter(|r| r.horizon == h).map(|r| (r.hi95 - r.lo95) as f64).sum::<f64>();
        assert!(width(7) >= width(1));
    }
}
