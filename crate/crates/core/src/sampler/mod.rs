//! Bayesian estimation by Metropolis-within-Gibbs.
//!
//! Priors: `beta_q ~ N(0, 1000)`, precisions `1/sigma^2 ~ Gamma(0.001, 0.001)`
//! for `sigma_eta`, every `sigma_b_q` and `sigma_omega`, `pi ~ Uniform(0, 1)`,
//! `1/psi ~ Gamma(0.001, 0.001)` and `gamma_i1 ~ N(0, 10^2)`.
//!
//! Each chain runs `n_adapt` iterations with proposal-scale adaptation, then
//! `n_burnin` with frozen scales, then `n_iter` of which every `thin`-th
//! state is kept.

mod chain;
pub mod diagnostics;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use chain::{
    draw_precision, inclusion_probability, precision_posterior, AcceptanceLedger, BlockCounter,
    Chain, LogPosteriorParts, Priors, TARGET_ACCEPTANCE,
};
pub use diagnostics::{gelman_rubin, quantile, quantile_sorted, Param, Summary};

use crate::error::{Error, Result};
use crate::ingest::CasePanel;
use crate::model::{normal, Grid, LatentState, ModelParams};
use crate::polybasis::{build_orthogonal_basis, OrthoBasis};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_adapt: usize,
    pub n_burnin: usize,
    pub n_iter: usize,
    pub thin: usize,
    pub seed: u64,
    /// Polynomial degree Q of the autoregressive coefficient.
    pub degree: usize,
    /// Keep the full latent state with every retained draw.
    pub keep_states: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            n_adapt: 2000,
            n_burnin: 50_000,
            n_iter: 50_000,
            thin: 25,
            seed: 20_200_520,
            degree: 2,
            keep_states: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 1 || self.n_adapt < 1 || self.n_burnin < 1 || self.n_iter < 1 || self.thin < 1
        {
            return Err(Error::Domain("MCMC counts must all be at least 1".into()));
        }
        if self.retained_per_chain() < 2 {
            return Err(Error::Domain(format!(
                "n_iter / thin = {} retained draws per chain; need at least 2",
                self.retained_per_chain()
            )));
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        self.n_iter / self.thin
    }

    pub fn total_iterations(&self) -> usize {
        self.n_adapt + self.n_burnin + self.n_iter
    }
}

/// One retained posterior draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    /// Zero-based index within the sampling phase.
    pub iteration: usize,
    pub params: ModelParams,
    /// Random effects, N x (Q+1).
    pub b: Grid<f64>,
    /// `gamma_iT` for every country, the launch point of forecasts.
    pub gamma_last: Vec<f64>,
    pub log_posterior: f64,
    pub state: Option<LatentState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub draws: Vec<Draw>,
    pub acceptance: AcceptanceLedger,
    /// `(global iteration, log posterior)` every `thin` iterations across all phases.
    pub trace: Vec<(usize, f64)>,
}

/// Pooled posterior moments of the latent cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub n_draws: usize,
    pub gamma_mean: Grid<f64>,
    pub gamma_sd: Grid<f64>,
    /// Posterior outlier probability of each cell.
    pub lambda_mean: Grid<f64>,
}

#[derive(Clone, Debug)]
struct LatentAccumulator {
    n: usize,
    gamma_sum: Grid<f64>,
    gamma_sq: Grid<f64>,
    lambda_sum: Grid<f64>,
}

impl LatentAccumulator {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            n: 0,
            gamma_sum: Grid::filled(rows, cols, 0.0),
            gamma_sq: Grid::filled(rows, cols, 0.0),
            lambda_sum: Grid::filled(rows, cols, 0.0),
        }
    }

    fn add(&mut self, state: &LatentState) {
        self.n += 1;
        for i in 0..state.gamma.rows() {
            for t in 0..state.gamma.cols() {
                let g = state.gamma[(i, t)];
                self.gamma_sum[(i, t)] += g;
                self.gamma_sq[(i, t)] += g * g;
                self.lambda_sum[(i, t)] += f64::from(u8::from(state.lambda[(i, t)]));
            }
        }
    }

    fn merge(mut self, other: &Self) -> Self {
        self.n += other.n;
        for (grid, add) in [
            (&mut self.gamma_sum, &other.gamma_sum),
            (&mut self.gamma_sq, &other.gamma_sq),
            (&mut self.lambda_sum, &other.lambda_sum),
        ] {
            for i in 0..grid.rows() {
                for (a, b) in grid.row_mut(i).iter_mut().zip(add.row(i)) {
                    *a += b;
                }
            }
        }
        self
    }

    fn finish(self) -> LatentSummary {
        let (rows, cols) = (self.gamma_sum.rows(), self.gamma_sum.cols());
        let n = self.n.max(1) as f64;
        let mut mean = Grid::filled(rows, cols, 0.0);
        let mut sd = Grid::filled(rows, cols, 0.0);
        let mut lambda = Grid::filled(rows, cols, 0.0);
        for i in 0..rows {
            for t in 0..cols {
                let m = self.gamma_sum[(i, t)] / n;
                mean[(i, t)] = m;
                sd[(i, t)] = (self.gamma_sq[(i, t)] / n - m * m).max(0.0).sqrt();
                lambda[(i, t)] = self.lambda_sum[(i, t)] / n;
            }
        }
        LatentSummary {
            n_draws: self.n,
            gamma_mean: mean,
            gamma_sd: sd,
            lambda_mean: lambda,
        }
    }
}

/// Thinned multi-chain output of [`fit_mcmc`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub config: McmcConfig,
    pub priors: Priors,
    pub country_ids: Vec<String>,
    pub t_count: usize,
    pub panel_hash: String,
    pub chains: Vec<ChainDraws>,
    pub latent: LatentSummary,
}

impl PosteriorDraws {
    pub fn n_terms(&self) -> usize {
        self.config.degree + 1
    }

    pub fn n_retained(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// Draws pooled in chain order.
    pub fn pooled(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn param_chains(&self, param: Param) -> Result<Vec<Vec<f64>>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| param.get(&d.params)).collect())
            .collect()
    }

    pub fn pooled_values(&self, param: Param) -> Result<Vec<f64>> {
        Ok(self.param_chains(param)?.into_iter().flatten().collect())
    }

    pub fn rhat(&self, param: Param) -> Result<f64> {
        gelman_rubin(&self.param_chains(param)?)
    }

    pub fn acceptance(&self) -> AcceptanceLedger {
        let mut total = AcceptanceLedger::default();
        for c in &self.chains {
            total.merge(&c.acceptance);
        }
        total
    }

    pub fn basis(&self) -> Result<OrthoBasis> {
        build_orthogonal_basis(self.t_count, self.config.degree)
    }

    /// Check that these draws were fitted on `panel`.
    pub fn check_panel(&self, panel: &CasePanel) -> Result<()> {
        if panel.content_hash() != self.panel_hash {
            return Err(Error::State(
                "posterior draws were fitted on a different panel".into(),
            ));
        }
        Ok(())
    }
}

/// Mean and equal-tailed 95% interval of one parameter over pooled draws.
pub fn summarize_posterior(draws: &PosteriorDraws, param: Param) -> Result<Summary> {
    Summary::from_values(&draws.pooled_values(param)?)
}

/// Like [`summarize_posterior`] with the parameter named as text (`beta0`, `sigma_eta`, ...).
pub fn summarize_named(draws: &PosteriorDraws, name: &str) -> Result<Summary> {
    let param: Param = name.parse()?;
    if let Param::Beta(q) | Param::SigmaB(q) = param {
        if q >= draws.n_terms() {
            return Err(Error::Lookup(name.to_string()));
        }
    }
    summarize_posterior(draws, param)
}

/// Default starting point: the latent log-intensity at the data.
pub fn initial_point(panel: &CasePanel, degree: usize) -> (ModelParams, LatentState) {
    let (n, t_count, terms) = (panel.n_countries(), panel.n_days(), degree + 1);
    let mut beta = vec![0.0; terms];
    beta[0] = 1.0;
    let params = ModelParams {
        beta,
        sigma_eta: 0.5,
        sigma_b: vec![0.5; terms],
        pi_outlier: 0.1,
        sigma_omega: 0.5,
        psi: 0.01,
    };
    let mut gamma = Grid::filled(n, t_count, 0.0);
    for i in 0..n {
        for t in 0..t_count {
            gamma[(i, t)] = (panel.get(i, t) as f64 + 1.0).ln();
        }
    }
    let state = LatentState {
        gamma,
        b: Grid::filled(n, terms, 0.0),
        lambda: Grid::filled(n, t_count, false),
        omega: Grid::filled(n, t_count, 0.0),
    };
    (params, state)
}

/// Spread later chains around the default start so that between-chain
/// disagreement can show up in the diagnostics.
fn jitter(rng: &mut ChaCha8Rng, params: &mut ModelParams, state: &mut LatentState) {
    let mut scale = |x: &mut f64, sd: f64| *x *= normal(rng, 0.0, sd).exp();
    scale(&mut params.sigma_eta, 0.5);
    scale(&mut params.sigma_omega, 0.5);
    scale(&mut params.psi, 1.0);
    for s in params.sigma_b.iter_mut() {
        scale(s, 0.5);
    }
    params.pi_outlier = 0.05 + 0.15 * rand::Rng::random::<f64>(rng);
    for i in 0..state.gamma.rows() {
        for g in state.gamma.row_mut(i) {
            *g += normal(rng, 0.0, 0.1);
        }
    }
}

/// Fit the model to `panel` with the default priors.
pub fn fit_mcmc(panel: &CasePanel, config: &McmcConfig) -> Result<PosteriorDraws> {
    fit_mcmc_with(panel, config, &Priors::default(), None)
}

/// Fit with explicit priors and, optionally, an explicit start for every chain.
pub fn fit_mcmc_with(
    panel: &CasePanel,
    config: &McmcConfig,
    priors: &Priors,
    start: Option<(ModelParams, LatentState)>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    if panel.n_days() < 3 {
        return Err(Error::InsufficientData(format!(
            "fitting needs at least 3 days, panel has {}",
            panel.n_days()
        )));
    }
    let basis = build_orthogonal_basis(panel.n_days(), config.degree)?;
    info!(
        "fitting {} countries x {} days, Q={}, {} chains x {} iterations",
        panel.n_countries(),
        panel.n_days(),
        config.degree,
        config.n_chains,
        config.total_iterations()
    );
    let results: Vec<(ChainDraws, LatentAccumulator)> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(panel, &basis, config, priors, start.clone(), c))
        .collect::<Result<_>>()?;

    let mut acc = LatentAccumulator::new(panel.n_countries(), panel.n_days());
    let mut chains = Vec::with_capacity(results.len());
    for (draws, chain_acc) in results {
        acc = acc.merge(&chain_acc);
        chains.push(draws);
    }
    Ok(PosteriorDraws {
        config: config.clone(),
        priors: priors.clone(),
        country_ids: panel.countries().to_vec(),
        t_count: panel.n_days(),
        panel_hash: panel.content_hash(),
        chains,
        latent: acc.finish(),
    })
}

fn run_chain(
    panel: &CasePanel,
    basis: &OrthoBasis,
    config: &McmcConfig,
    priors: &Priors,
    start: Option<(ModelParams, LatentState)>,
    chain_index: usize,
) -> Result<(ChainDraws, LatentAccumulator)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain_index as u64);
    let (mut params, mut state) = match start {
        Some(point) => point,
        None => initial_point(panel, config.degree),
    };
    if chain_index > 0 {
        jitter(&mut rng, &mut params, &mut state);
    }
    let mut chain = Chain::new(panel, basis, priors.clone(), params, state)?;
    let mut acc = LatentAccumulator::new(panel.n_countries(), panel.n_days());
    let mut draws = Vec::with_capacity(config.retained_per_chain());
    let mut trace = Vec::new();
    let t_last = panel.n_days() - 1;

    for k in 0..config.total_iterations() {
        let adapt_step = (k < config.n_adapt).then(|| (k as f64 + 1.0).powf(-0.6));
        chain.set_adaptation(adapt_step);
        chain.step(&mut rng);
        if (k + 1) % config.thin == 0 {
            trace.push((k, chain.log_posterior()));
        }
        let Some(j) = k.checked_sub(config.n_adapt + config.n_burnin) else {
            continue;
        };
        if (j + 1) % config.thin == 0 {
            acc.add(&chain.state);
            draws.push(Draw {
                iteration: j,
                params: chain.params.clone(),
                b: chain.state.b.clone(),
                gamma_last: (0..panel.n_countries())
                    .map(|i| chain.state.gamma[(i, t_last)])
                    .collect(),
                log_posterior: chain.log_posterior(),
                state: config.keep_states.then(|| chain.state.clone()),
            });
        }
        if (k + 1) % 10_000 == 0 {
            debug!("chain {chain_index}: iteration {}", k + 1);
        }
    }
    Ok((
        ChainDraws {
            draws,
            acceptance: chain.ledger.clone(),
            trace,
        },
        acc,
    ))
}
