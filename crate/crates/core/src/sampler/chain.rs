//! One Markov chain and its update blocks.
//!
//! Each iteration runs, in order:
//!
//! 1. single-site random-walk Metropolis on every `gamma_it`, forward in time,
//! 2. an exact joint Gaussian draw of `(beta, b_1..b_N)` given the `gamma` paths,
//! 3. exact Gibbs for the outlier indicators `lambda_it`, followed by a swap
//!    move that trades a jump between `gamma_it` and `omega_it` while holding
//!    `log mu_it` fixed,
//! 4. `omega_it`: a prior draw when `lambda_it = 0`, random-walk Metropolis
//!    when `lambda_it = 1`,
//! 5. conjugate Gamma draws for the precisions `1/sigma_eta^2` and `1/sigma_b_q^2`,
//! 6. a conjugate Gamma draw for `1/sigma_omega^2` over every `omega_it`,
//! 7. an exact Beta draw for `pi`,
//! 8. log-scale random-walk Metropolis for `psi`, then a joint move that
//!    rescales every non-outlier `gamma_it` about its observed log count along
//!    with `psi`.
//!
//! Day 1 carries no observation, so `lambda_i1` and `omega_i1` are generated
//! from their priors and never feed back into `pi` or `sigma_omega`.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CasePanel;
use crate::model::{
    log_mean, nb_kernel, nb_log_pmf_log_mean, nb_log_rising, nb_size_term_diff, normal, phi_unchecked,
    Grid, LatentState, ModelParams, NbSize, LARGE_COUNT,
};
use crate::polybasis::OrthoBasis;

/// Hyperparameters of the prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// Variance of the independent normal prior on each `beta_q`.
    pub beta_variance: f64,
    /// Shape and rate of the Gamma prior on every precision and on `1/psi`.
    pub precision_shape: f64,
    pub precision_rate: f64,
    /// SD of the normal prior on `gamma_i1`.
    pub gamma_init_sd: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            beta_variance: 1000.0,
            precision_shape: 0.001,
            precision_rate: 0.001,
            gamma_init_sd: 10.0,
        }
    }
}

/// Target acceptance rate of every scalar random-walk block.
pub const TARGET_ACCEPTANCE: f64 = 0.44;
const MIN_LOG_SCALE: f64 = -12.0;
const MAX_LOG_SCALE: f64 = 3.0;
const PRECISION_FLOOR: f64 = 1e-10;
const PRECISION_CEILING: f64 = 1e12;

/// Proposal and acceptance counts for one Metropolis block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockCounter {
    pub proposed: u64,
    pub accepted: u64,
}

impl BlockCounter {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: &BlockCounter) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
    }
}

/// Acceptance bookkeeping for the Metropolis blocks, post-adaptation only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceLedger {
    pub gamma: BlockCounter,
    pub omega: BlockCounter,
    pub psi: BlockCounter,
    #[serde(default)]
    pub psi_rescale: BlockCounter,
    /// Outlier swap move (not adapted).
    #[serde(default)]
    pub swap: BlockCounter,
}

impl AcceptanceLedger {
    pub fn merge(&mut self, other: &AcceptanceLedger) {
        self.gamma.merge(&other.gamma);
        self.omega.merge(&other.omega);
        self.psi.merge(&other.psi);
        self.psi_rescale.merge(&other.psi_rescale);
        self.swap.merge(&other.swap);
    }

    /// Post-adaptation rates of the adaptive random-walk blocks.
    pub fn adaptive_rates(&self) -> [(&'static str, f64); 4] {
        [
            ("gamma", self.gamma.rate()),
            ("omega", self.omega.rate()),
            ("psi", self.psi.rate()),
            ("psi_rescale", self.psi_rescale.rate()),
        ]
    }
}

/// Log joint density split by factor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogPosteriorParts {
    pub likelihood: f64,
    pub gamma: f64,
    pub random_effects: f64,
    pub beta: f64,
    pub outliers: f64,
    pub precisions: f64,
    pub psi: f64,
}

impl LogPosteriorParts {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.gamma
            + self.random_effects
            + self.beta
            + self.outliers
            + self.precisions
            + self.psi
    }

    /// Name of the first non-finite factor.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("likelihood", self.likelihood),
            ("gamma", self.gamma),
            ("random_effects", self.random_effects),
            ("beta", self.beta),
            ("outliers", self.outliers),
            ("precisions", self.precisions),
            ("psi", self.psi),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Mutable state of a single chain together with its data.
pub struct Chain<'a> {
    counts: Vec<Vec<f64>>,
    basis: &'a OrthoBasis,
    priors: Priors,
    pub params: ModelParams,
    pub state: LatentState,
    /// `phi[(i, t)]` multiplies `gamma[(i, t - 1)]`; column 0 is unused.
    phi: Grid<f64>,
    gamma_log_scale: Grid<f64>,
    /// `omega` proposals use `exp(omega_log_scale) / sqrt(y + 1)`.
    omega_log_scale: f64,
    psi_log_scale: f64,
    rescale_log_scale: f64,
    /// `(psi, size term summed over observed cells below LARGE_COUNT)` at the
    /// two most recent `psi`.
    rising_cache: Cell<[(f64, f64); 2]>,
    /// Observed cells at or above LARGE_COUNT.
    large_cells: Vec<(usize, usize)>,
    adapt_step: Option<f64>,
    pub ledger: AcceptanceLedger,
}

impl<'a> Chain<'a> {
    /// Build a chain at a given point. Fails if the point has zero density.
    pub fn new(
        panel: &CasePanel,
        basis: &'a OrthoBasis,
        priors: Priors,
        params: ModelParams,
        state: LatentState,
    ) -> Result<Self> {
        let (n, t_count) = (panel.n_countries(), panel.n_days());
        if basis.t_count() != t_count {
            return Err(Error::Dimension(format!(
                "basis has {} days, panel {t_count}",
                basis.t_count()
            )));
        }
        if basis.n_terms() != params.beta.len() {
            return Err(Error::Dimension(format!(
                "basis has {} terms, beta {}",
                basis.n_terms(),
                params.beta.len()
            )));
        }
        params.validate()?;
        state.check_dims(n, t_count, basis.n_terms())?;
        let counts: Vec<Vec<f64>> = panel
            .counts()
            .iter()
            .map(|row| row.iter().map(|&y| y as f64).collect())
            .collect();
        let init_log_scale = |y: f64| (1.0 / (y + 1.0).sqrt()).clamp(0.02, 0.5).ln();
        let mut gamma_log_scale = Grid::filled(n, t_count, 0.0);
        for i in 0..n {
            for t in 0..t_count {
                gamma_log_scale[(i, t)] = init_log_scale(counts[i][t]);
            }
        }
        let large_cells = (0..n)
            .flat_map(|i| (1..t_count).map(move |t| (i, t)))
            .filter(|&(i, t)| counts[i][t] >= LARGE_COUNT)
            .collect();
        let mut chain = Self {
            counts,
            basis,
            priors,
            params,
            state,
            phi: Grid::filled(n, t_count, 0.0),
            gamma_log_scale,
            omega_log_scale: 0.0,
            psi_log_scale: 0.5f64.ln(),
            rescale_log_scale: 0.5f64.ln(),
            rising_cache: Cell::new([(f64::NAN, 0.0); 2]),
            large_cells,
            adapt_step: None,
            ledger: AcceptanceLedger::default(),
        };
        chain.refresh_phi();
        if let Some(block) = chain.log_posterior_parts().first_non_finite() {
            return Err(Error::Initialization(block));
        }
        Ok(chain)
    }

    fn n(&self) -> usize {
        self.counts.len()
    }

    fn t_count(&self) -> usize {
        self.basis.t_count()
    }

    /// Enable Robbins-Monro scale adaptation for this iteration with the given step.
    pub fn set_adaptation(&mut self, step: Option<f64>) {
        self.adapt_step = step;
    }

    pub fn refresh_phi(&mut self) {
        for i in 0..self.n() {
            for t in 1..self.t_count() {
                self.phi[(i, t)] =
                    phi_unchecked(&self.params.beta, self.state.b.row(i), self.basis.row(t + 1));
            }
        }
    }

    pub fn phi(&self) -> &Grid<f64> {
        &self.phi
    }

    fn size(&self) -> NbSize {
        NbSize::from_psi(self.params.psi)
    }

    /// Run one full iteration of every block.
    pub fn step(&mut self, rng: &mut ChaCha8Rng) {
        self.update_gamma(rng);
        self.update_coefficients(rng);
        self.update_lambda(rng);
        self.update_outlier_swap(rng);
        self.update_omega(rng);
        self.update_sigma_eta(rng);
        self.update_sigma_b(rng);
        self.update_sigma_omega(rng);
        self.update_pi(rng);
        self.update_psi(rng);
        self.update_psi_rescale(rng);
    }

    fn adapt(&self, log_scale: &mut f64, accept_prob: f64) {
        if let Some(step) = self.adapt_step {
            *log_scale = (*log_scale + step * (accept_prob - TARGET_ACCEPTANCE))
                .clamp(MIN_LOG_SCALE, MAX_LOG_SCALE);
        }
    }

    fn record(counter: &mut BlockCounter, adapting: bool, accepted: bool) {
        if !adapting {
            counter.record(accepted);
        }
    }

    /// Log conditional of `gamma_it` up to a constant.
    fn gamma_conditional(&self, i: usize, t: usize, g: f64, inv_var: f64, r: NbSize) -> f64 {
        let mut lp = if t == 0 {
            let sd = self.priors.gamma_init_sd;
            -0.5 * g * g / (sd * sd)
        } else {
            let d = g - self.phi[(i, t)] * self.state.gamma[(i, t - 1)];
            let eta = log_mean(g, self.state.lambda[(i, t)], self.state.omega[(i, t)]);
            -0.5 * d * d * inv_var + nb_kernel(self.counts[i][t], eta, r)
        };
        if t + 1 < self.t_count() {
            let d = self.state.gamma[(i, t + 1)] - self.phi[(i, t + 1)] * g;
            lp -= 0.5 * d * d * inv_var;
        }
        lp
    }

    pub fn update_gamma(&mut self, rng: &mut ChaCha8Rng) {
        let inv_var = self.params.sigma_eta.powi(-2);
        let r = self.size();
        let adapting = self.adapt_step.is_some();
        for i in 0..self.n() {
            for t in 0..self.t_count() {
                let current = self.state.gamma[(i, t)];
                let mut log_scale = self.gamma_log_scale[(i, t)];
                let proposal = current + log_scale.exp() * rng.sample::<f64, _>(StandardNormal);
                let log_ratio = self.gamma_conditional(i, t, proposal, inv_var, r)
                    - self.gamma_conditional(i, t, current, inv_var, r);
                let accepted = accept(rng, log_ratio);
                if accepted {
                    self.state.gamma[(i, t)] = proposal;
                }
                self.adapt(&mut log_scale, log_ratio.exp().min(1.0));
                self.gamma_log_scale[(i, t)] = log_scale;
                Self::record(&mut self.ledger.gamma, adapting, accepted);
            }
        }
    }

    /// Joint draw of `(beta, b)` from its Gaussian full conditional.
    ///
    /// Given the `gamma` paths each transition is a linear regression
    /// `gamma_it = x_it' (beta + b_i) + eta_it` with `x_itq = P_q(t) gamma_i,t-1`.
    /// `beta` is drawn with every `b_i` integrated out, then each `b_i | beta`.
    pub fn update_coefficients(&mut self, rng: &mut ChaCha8Rng) {
        let k = self.basis.n_terms();
        let inv_var = self.params.sigma_eta.powi(-2);
        let re_precision =
            DVector::from_iterator(k, self.params.sigma_b.iter().map(|s| s.powi(-2)));
        let re_diag = DMatrix::from_diagonal(&re_precision);

        let mut beta_precision =
            DMatrix::<f64>::identity(k, k) * self.priors.beta_variance.recip();
        let mut beta_linear = DVector::<f64>::zeros(k);
        let mut per_country = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let mut gram = DMatrix::<f64>::zeros(k, k);
            let mut cross = DVector::<f64>::zeros(k);
            for t in 1..self.t_count() {
                let prev = self.state.gamma[(i, t - 1)];
                let x = DVector::from_iterator(k, self.basis.row(t + 1).iter().map(|p| p * prev));
                gram.ger(inv_var, &x, &x, 1.0);
                cross.axpy(inv_var * self.state.gamma[(i, t)], &x, 1.0);
            }
            let conditional = symmetric(&gram + &re_diag);
            let chol = conditional
                .clone()
                .cholesky()
                .expect("random-effect conditional precision is positive definite");
            let solved_gram = chol.solve(&gram);
            let solved_cross = chol.solve(&cross);
            // (A^-1 + D^-1)^-1 written in whichever form loses less to cancellation.
            let marginal = if re_precision.sum() > gram.trace() {
                &gram - &gram * &solved_gram
            } else {
                &re_diag - &re_diag * chol.solve(&re_diag)
            };
            beta_precision += symmetric(marginal);
            beta_linear += &cross - &gram * &solved_cross;
            per_country.push((chol, gram, cross));
        }
        let beta = draw_gaussian(rng, symmetric(beta_precision), &beta_linear);
        for (i, (chol, gram, cross)) in per_country.into_iter().enumerate() {
            let linear = cross - gram * &beta;
            let mean = chol.solve(&linear);
            let noise = standard_normals(rng, k);
            let b_i = mean + chol.l().transpose().solve_upper_triangular(&noise).expect("triangular");
            self.state.b.row_mut(i).copy_from_slice(b_i.as_slice());
        }
        self.params.beta = beta.as_slice().to_vec();
        self.refresh_phi();
    }

    pub fn update_lambda(&mut self, rng: &mut ChaCha8Rng) {
        let r = self.size();
        let pi = self.params.pi_outlier;
        for i in 0..self.n() {
            self.state.lambda[(i, 0)] = rng.random::<f64>() < pi;
            for t in 1..self.t_count() {
                let p = outlier_probability(
                    self.counts[i][t],
                    self.state.gamma[(i, t)],
                    self.state.omega[(i, t)],
                    pi,
                    r,
                );
                self.state.lambda[(i, t)] = rng.random::<f64>() < p;
            }
        }
    }

    /// Sum of squared innovations `gamma_it - phi_it gamma_i,t-1` over `t >= 2`.
    pub fn innovation_sum_of_squares(&self) -> (f64, usize) {
        let mut ss = 0.0;
        for i in 0..self.n() {
            for t in 1..self.t_count() {
                let d = self.state.gamma[(i, t)] - self.phi[(i, t)] * self.state.gamma[(i, t - 1)];
                ss += d * d;
            }
        }
        (ss, self.n() * (self.t_count() - 1))
    }

    pub fn update_sigma_eta(&mut self, rng: &mut ChaCha8Rng) {
        let (ss, count) = self.innovation_sum_of_squares();
        let tau = draw_precision(rng, &self.priors, ss, count);
        self.params.sigma_eta = tau.recip().sqrt();
    }

    pub fn update_sigma_b(&mut self, rng: &mut ChaCha8Rng) {
        for q in 0..self.basis.n_terms() {
            let ss: f64 = (0..self.n()).map(|i| self.state.b[(i, q)].powi(2)).sum();
            let tau = draw_precision(rng, &self.priors, ss, self.n());
            self.params.sigma_b[q] = tau.recip().sqrt();
        }
    }

    /// Joint move on `(gamma_it, lambda_it, omega_it)` that keeps `log mu_it`.
    ///
    /// New values of `gamma_it` are drawn from its Gaussian transition-only
    /// conditional. An outlier cell first re-splits `gamma_it + omega_it`
    /// around such a draw, then tries to fold `omega_it` back into
    /// `gamma_it`, redrawing `omega_it` from its prior with `lambda = 0`. A
    /// regular cell tries the reverse, handing the difference to `omega_it`
    /// with `lambda = 1`. The likelihood cancels from every acceptance ratio.
    pub fn update_outlier_swap(&mut self, rng: &mut ChaCha8Rng) {
        let pi = self.params.pi_outlier;
        if pi <= 0.0 || pi >= 1.0 {
            return;
        }
        let (log_pi, log_not_pi) = (pi.ln(), (-pi).ln_1p());
        let inv_var = self.params.sigma_eta.powi(-2);
        let sd_omega = self.params.sigma_omega;
        let ln_prior_omega = |w: f64| -0.5 * (w / sd_omega).powi(2) - sd_omega.ln();
        let adapting = self.adapt_step.is_some();
        let t_count = self.t_count();
        for i in 0..self.n() {
            for t in 1..t_count {
                let from_prev = self.phi[(i, t)] * self.state.gamma[(i, t - 1)];
                let next = (t + 1 < t_count)
                    .then(|| (self.phi[(i, t + 1)], self.state.gamma[(i, t + 1)]));
                let transition = |g: f64| {
                    let mut lp = -0.5 * (g - from_prev).powi(2) * inv_var;
                    if let Some((phi_next, g_next)) = next {
                        lp -= 0.5 * (g_next - phi_next * g).powi(2) * inv_var;
                    }
                    lp
                };
                let (mut precision, mut linear) = (inv_var, inv_var * from_prev);
                if let Some((phi_next, g_next)) = next {
                    precision += phi_next * phi_next * inv_var;
                    linear += phi_next * g_next * inv_var;
                }
                let (mean, var) = (linear / precision, precision.recip());
                let ln_proposal = |g: f64| -0.5 * (g - mean).powi(2) / var - 0.5 * var.ln();

                let mut g = self.state.gamma[(i, t)];
                if self.state.lambda[(i, t)] {
                    // Re-split the jump between gamma and omega with lambda held at 1.
                    let w = self.state.omega[(i, t)];
                    let u = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                    let log_ratio = transition(u) + ln_prior_omega(g + w - u) + ln_proposal(g)
                        - transition(g)
                        - ln_prior_omega(w)
                        - ln_proposal(u);
                    let accepted = accept(rng, log_ratio);
                    if accepted {
                        self.state.gamma[(i, t)] = u;
                        self.state.omega[(i, t)] = g + w - u;
                        g = u;
                    }
                    Self::record(&mut self.ledger.swap, adapting, accepted);
                }
                let accepted = if self.state.lambda[(i, t)] {
                    let w = self.state.omega[(i, t)];
                    let merged = g + w;
                    let log_ratio = transition(merged) + log_not_pi + ln_proposal(g)
                        - transition(g)
                        - log_pi
                        - ln_prior_omega(w);
                    let accepted = accept(rng, log_ratio);
                    if accepted {
                        self.state.gamma[(i, t)] = merged;
                        self.state.lambda[(i, t)] = false;
                        self.state.omega[(i, t)] = normal(rng, 0.0, sd_omega);
                    }
                    accepted
                } else {
                    let u = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                    let log_ratio = transition(u) - ln_proposal(u) + log_pi + ln_prior_omega(g - u)
                        - transition(g)
                        - log_not_pi;
                    let accepted = accept(rng, log_ratio);
                    if accepted {
                        self.state.gamma[(i, t)] = u;
                        self.state.lambda[(i, t)] = true;
                        self.state.omega[(i, t)] = g - u;
                    }
                    accepted
                };
                Self::record(&mut self.ledger.swap, adapting, accepted);
            }
        }
    }

    pub fn update_omega(&mut self, rng: &mut ChaCha8Rng) {
        let sd = self.params.sigma_omega;
        let inv_var = sd.powi(-2);
        let r = self.size();
        let adapting = self.adapt_step.is_some();
        let multiplier = self.omega_log_scale.exp();
        let (mut accept_sum, mut updates) = (0.0, 0usize);
        for i in 0..self.n() {
            for t in 0..self.t_count() {
                if t == 0 || !self.state.lambda[(i, t)] {
                    self.state.omega[(i, t)] = normal(rng, 0.0, sd);
                    continue;
                }
                let y = self.counts[i][t];
                let g = self.state.gamma[(i, t)];
                let target = |w: f64| -0.5 * w * w * inv_var + nb_kernel(y, g + w, r);
                let current = self.state.omega[(i, t)];
                let step = multiplier / (y + 1.0).sqrt();
                let proposal = current + step * rng.sample::<f64, _>(StandardNormal);
                let log_ratio = target(proposal) - target(current);
                let accepted = accept(rng, log_ratio);
                if accepted {
                    self.state.omega[(i, t)] = proposal;
                }
                accept_sum += log_ratio.exp().min(1.0);
                updates += 1;
                Self::record(&mut self.ledger.omega, adapting, accepted);
            }
        }
        if updates > 0 {
            let mut log_scale = self.omega_log_scale;
            self.adapt(&mut log_scale, accept_sum / updates as f64);
            self.omega_log_scale = log_scale;
        }
    }

    pub fn update_sigma_omega(&mut self, rng: &mut ChaCha8Rng) {
        let mut ss = 0.0;
        for i in 0..self.n() {
            ss += self.state.omega.row(i)[1..].iter().map(|w| w * w).sum::<f64>();
        }
        let tau = draw_precision(rng, &self.priors, ss, self.n() * (self.t_count() - 1));
        self.params.sigma_omega = tau.recip().sqrt();
    }

    pub fn update_pi(&mut self, rng: &mut ChaCha8Rng) {
        let cells = self.n() * (self.t_count() - 1);
        let outliers = (0..self.n())
            .map(|i| self.state.lambda.row(i)[1..].iter().filter(|&&l| l).count())
            .sum::<usize>();
        let beta = Beta::new(1.0 + outliers as f64, 1.0 + (cells - outliers) as f64)
            .expect("positive Beta parameters");
        self.params.pi_outlier = beta.sample(rng);
    }

    /// `ln Gamma(y + r) - ln Gamma(r)` summed over observed cells below
    /// LARGE_COUNT, cached by `psi`.
    fn rising_sum(&self, psi: f64) -> f64 {
        let cache = self.rising_cache.get();
        if let Some(&(_, total)) = cache.iter().find(|(p, _)| *p == psi) {
            return total;
        }
        let r = psi.recip();
        let total = self
            .counts
            .iter()
            .flat_map(|row| &row[1..])
            .filter(|&&y| y < LARGE_COUNT)
            .map(|&y| nb_log_rising(y as u64, r) + y * r.ln())
            .sum();
        self.rising_cache.set([cache[1], (psi, total)]);
        total
    }

    /// Change in the size term of the large-count cells from `r0` to `r1`.
    fn large_count_size_diff(&self, r1: f64, r0: f64) -> f64 {
        self.large_cells
            .iter()
            .map(|&(i, t)| nb_size_term_diff(self.counts[i][t], r1, r0))
            .sum()
    }

    /// Terms of the log joint that involve `psi` at `(log_psi, gamma)`, except
    /// the size terms of large-count cells. With `transitions` the `gamma`
    /// transition densities for `t >= 2` are included.
    fn psi_terms(&self, log_psi: f64, gamma: &Grid<f64>, transitions: bool) -> f64 {
        let psi = log_psi.exp();
        let r = NbSize { r: psi.recip(), ln_r: -log_psi };
        let inv_var = self.params.sigma_eta.powi(-2);
        let mut lp = 0.0;
        for i in 0..self.n() {
            for t in 1..self.t_count() {
                let g = gamma[(i, t)];
                let eta = log_mean(g, self.state.lambda[(i, t)], self.state.omega[(i, t)]);
                lp += nb_kernel(self.counts[i][t], eta, r);
                if transitions {
                    let d = g - self.phi[(i, t)] * gamma[(i, t - 1)];
                    lp -= 0.5 * d * d * inv_var;
                }
            }
        }
        lp + self.rising_sum(psi) + log_psi_prior(&self.priors, log_psi)
    }

    pub fn update_psi(&mut self, rng: &mut ChaCha8Rng) {
        let current = self.params.psi.ln();
        let proposal = current + self.psi_log_scale.exp() * rng.sample::<f64, _>(StandardNormal);
        let log_ratio = self.psi_terms(proposal, &self.state.gamma, false)
            - self.psi_terms(current, &self.state.gamma, false)
            + self.large_count_size_diff((-proposal).exp(), (-current).exp());
        let log_ratio = if log_ratio.is_nan() { f64::NEG_INFINITY } else { log_ratio };
        let accepted = accept(rng, log_ratio);
        if accepted {
            self.params.psi = proposal.exp();
        }
        let mut log_scale = self.psi_log_scale;
        self.adapt(&mut log_scale, log_ratio.exp().min(1.0));
        self.psi_log_scale = log_scale;
        let adapting = self.adapt_step.is_some();
        Self::record(&mut self.ledger.psi, adapting, accepted);
    }

    /// Joint Metropolis move on `psi` and the non-outlier latent levels.
    ///
    /// With `v = 1/(y + 1/2)` and anchor `a = ln(y + 1/2)`, a proposal
    /// `psi' = psi e^e` maps `gamma_it` to `a + c (gamma_it - a)` with
    /// `c = sqrt((psi' + v) / (psi + v))`, so the residual spread around the
    /// data follows the overdispersion. The map is its own inverse under
    /// `-e`; the ratio carries its Jacobian `prod c`.
    pub fn update_psi_rescale(&mut self, rng: &mut ChaCha8Rng) {
        let current = self.params.psi.ln();
        let proposal =
            current + self.rescale_log_scale.exp() * rng.sample::<f64, _>(StandardNormal);
        let (psi, psi_new) = (self.params.psi, proposal.exp());
        let mut gamma = self.state.gamma.clone();
        let mut log_jacobian = 0.0;
        for i in 0..self.n() {
            for t in 1..self.t_count() {
                if self.state.lambda[(i, t)] {
                    continue;
                }
                let y = self.counts[i][t] + 0.5;
                let (anchor, v) = (y.ln(), y.recip());
                let c = ((psi_new + v) / (psi + v)).sqrt();
                gamma[(i, t)] = anchor + c * (gamma[(i, t)] - anchor);
                log_jacobian += c.ln();
            }
        }
        let log_ratio = self.psi_terms(proposal, &gamma, true)
            - self.psi_terms(current, &self.state.gamma, true)
            + self.large_count_size_diff(psi_new.recip(), psi.recip())
            + log_jacobian;
        let log_ratio = if log_ratio.is_nan() { f64::NEG_INFINITY } else { log_ratio };
        let accepted = accept(rng, log_ratio);
        if accepted {
            self.params.psi = psi_new;
            self.state.gamma = gamma;
        }
        let mut log_scale = self.rescale_log_scale;
        self.adapt(&mut log_scale, log_ratio.exp().min(1.0));
        self.rescale_log_scale = log_scale;
        let adapting = self.adapt_step.is_some();
        Self::record(&mut self.ledger.psi_rescale, adapting, accepted);
    }

    /// Log joint density of data, latent state and parameters.
    ///
    /// Precisions are scored on the precision scale and `psi` through the
    /// density of `1/psi`; day-1 outlier terms are excluded.
    pub fn log_posterior_parts(&self) -> LogPosteriorParts {
        let p = &self.params;
        let mut parts = LogPosteriorParts::default();
        let ln_norm = |x: f64, sd: f64| -0.5 * (x / sd).powi(2) - sd.ln() - 0.5 * LN_2PI;
        for i in 0..self.n() {
            parts.gamma += ln_norm(self.state.gamma[(i, 0)], self.priors.gamma_init_sd);
            for t in 1..self.t_count() {
                let g = self.state.gamma[(i, t)];
                let mean = self.phi[(i, t)] * self.state.gamma[(i, t - 1)];
                parts.gamma += ln_norm(g - mean, p.sigma_eta);
                let lambda = self.state.lambda[(i, t)];
                let omega = self.state.omega[(i, t)];
                parts.likelihood +=
                    nb_log_pmf_log_mean(self.counts[i][t] as u64, log_mean(g, lambda, omega), p.psi);
                parts.outliers += if lambda {
                    p.pi_outlier.ln()
                } else {
                    (1.0 - p.pi_outlier).ln()
                } + ln_norm(omega, p.sigma_omega);
            }
            for (q, &sd) in p.sigma_b.iter().enumerate() {
                parts.random_effects += ln_norm(self.state.b[(i, q)], sd);
            }
        }
        let beta_sd = self.priors.beta_variance.sqrt();
        parts.beta = p.beta.iter().map(|&b| ln_norm(b, beta_sd)).sum();
        let (a, rate) = (self.priors.precision_shape, self.priors.precision_rate);
        let ln_gamma_density =
            |tau: f64| a * rate.ln() - statrs::function::gamma::ln_gamma(a) + (a - 1.0) * tau.ln() - rate * tau;
        parts.precisions = std::iter::once(p.sigma_eta)
            .chain(std::iter::once(p.sigma_omega))
            .chain(p.sigma_b.iter().copied())
            .map(|s| ln_gamma_density(s.powi(-2)))
            .sum();
        parts.psi = ln_gamma_density(p.psi.recip());
        parts
    }

    pub fn log_posterior(&self) -> f64 {
        self.log_posterior_parts().total()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn accept(rng: &mut ChaCha8Rng, log_ratio: f64) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

fn symmetric(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn standard_normals(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from `N(precision^-1 linear, precision^-1)`.
fn draw_gaussian(rng: &mut ChaCha8Rng, precision: DMatrix<f64>, linear: &DVector<f64>) -> DVector<f64> {
    let k = linear.len();
    let chol = precision
        .cholesky()
        .expect("coefficient posterior precision is positive definite");
    let mean = chol.solve(linear);
    let noise = standard_normals(rng, k);
    mean + chol.l().transpose().solve_upper_triangular(&noise).expect("triangular")
}

/// Conjugate draw of a normal precision from `count` zero-mean residuals with sum of squares `ss`.
///
/// The draw is clamped to `[1e-10, 1e12]` so the implied SD and its square
/// stay finite when the data carry almost no information.
pub fn draw_precision(rng: &mut ChaCha8Rng, priors: &Priors, ss: f64, count: usize) -> f64 {
    let (shape, rate) = precision_posterior(priors, ss, count);
    let scale = rate.recip().min(f64::MAX);
    Gamma::new(shape, scale)
        .map(|g| g.sample(rng))
        .unwrap_or(shape / rate)
        .clamp(PRECISION_FLOOR, PRECISION_CEILING)
}

/// Shape and rate of the Gamma full conditional of a precision.
pub fn precision_posterior(priors: &Priors, ss: f64, count: usize) -> (f64, f64) {
    (
        priors.precision_shape + 0.5 * count as f64,
        priors.precision_rate + 0.5 * ss,
    )
}

/// Log prior density of `log psi` implied by a Gamma prior on `1/psi`.
fn log_psi_prior(priors: &Priors, log_psi: f64) -> f64 {
    -priors.precision_shape * log_psi - priors.precision_rate * (-log_psi).exp()
}

/// Conditional probability that a cell is an outlier given its neighbours in the state.
pub fn inclusion_probability(y: f64, gamma: f64, omega: f64, pi: f64, psi: f64) -> f64 {
    outlier_probability(y, gamma, omega, pi, NbSize::from_psi(psi))
}

fn outlier_probability(y: f64, gamma: f64, omega: f64, pi: f64, r: NbSize) -> f64 {
    if pi <= 0.0 {
        return 0.0;
    }
    if pi >= 1.0 {
        return 1.0;
    }
    let log_odds =
        pi.ln() - (-pi).ln_1p() + nb_kernel(y, gamma + omega, r) - nb_kernel(y, gamma, r);
    if log_odds > 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    }
}
