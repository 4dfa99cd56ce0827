//! Generative model for a panel of overdispersed daily counts.
//!
//! ```text
//! Y_it | Y_i,t-1 ~ NB(mu_it, psi)              t = 2..T
//! log mu_it      = gamma_it + lambda_it * omega_it
//! gamma_it       = phi_it * gamma_i,t-1 + eta_it,   eta_it ~ N(0, sigma_eta^2)
//! phi_it         = sum_q (beta_q + b_iq) P_q(t),    b_iq ~ N(0, sigma_b_q^2)
//! lambda_it ~ Bernoulli(pi),  omega_it ~ N(0, sigma_omega^2)
//! ```
//!
//! The negative binomial uses size `r = 1/psi` and success probability
//! `r / (r + mu)`, so the mean is `mu` and the variance `mu + psi * mu^2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::ingest::CasePanel;
use crate::polybasis::{build_orthogonal_basis, OrthoBasis};

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

impl<T> Grid<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid<T> {
    type Output = T;
    fn index(&self, (i, t): (usize, usize)) -> &T {
        &self.data[i * self.cols + t]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (i, t): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + t]
    }
}

/// Global model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub sigma_eta: f64,
    pub sigma_b: Vec<f64>,
    pub pi_outlier: f64,
    pub sigma_omega: f64,
    pub psi: f64,
}

impl ModelParams {
    pub fn degree(&self) -> usize {
        self.beta.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() || self.beta.len() != self.sigma_b.len() {
            return Err(Error::Dimension(format!(
                "beta has {} terms, sigma_b has {}",
                self.beta.len(),
                self.sigma_b.len()
            )));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.sigma_eta) || !positive(self.sigma_omega) || !positive(self.psi) {
            return Err(Error::Domain("sigma_eta, sigma_omega and psi must be positive".into()));
        }
        if !self.sigma_b.iter().all(|&s| positive(s)) {
            return Err(Error::Domain("random-effect SDs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pi_outlier) {
            return Err(Error::Domain("pi_outlier must lie in [0, 1]".into()));
        }
        if !self.beta.iter().all(|b| b.is_finite()) {
            return Err(Error::Domain("beta must be finite".into()));
        }
        Ok(())
    }
}

/// Per-country, per-day latent quantities. `b` is N x (Q+1); the rest N x T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub gamma: Grid<f64>,
    pub b: Grid<f64>,
    pub lambda: Grid<bool>,
    pub omega: Grid<f64>,
}

impl LatentState {
    pub fn check_dims(&self, n: usize, t: usize, terms: usize) -> Result<()> {
        let ok = [&self.gamma, &self.omega]
            .iter()
            .all(|g| g.rows() == n && g.cols() == t)
            && self.lambda.rows() == n
            && self.lambda.cols() == t
            && self.b.rows() == n
            && self.b.cols() == terms;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "latent state does not match N={n}, T={t}, Q+1={terms}"
            )))
        }
    }
}

/// Log probability of `y` under NB with mean `mu` and dispersion `psi`.
pub fn nb_log_pmf(y: u64, mu: f64, psi: f64) -> Result<f64> {
    if !(mu > 0.0) || !(psi > 0.0) {
        return Err(Error::Domain(format!(
            "negative binomial needs mu > 0 and psi > 0, got mu={mu}, psi={psi}"
        )));
    }
    Ok(nb_log_pmf_unchecked(y, mu, psi))
}

/// Small counts with a large size `r` sum the rising factorial term by term,
/// where the log-gamma difference would cancel.
const RISING_SUM_LIMIT: u64 = 64;
const RISING_SUM_MIN_SIZE: f64 = 1e4;

pub(crate) fn nb_log_pmf_unchecked(y: u64, mu: f64, psi: f64) -> f64 {
    nb_log_pmf_log_mean(y, mu.ln(), psi)
}

/// NB log-pmf parameterized by `log mu`, finite for any finite `log_mu`.
pub(crate) fn nb_log_pmf_log_mean(y: u64, log_mu: f64, psi: f64) -> f64 {
    let size = NbSize::from_psi(psi);
    let yf = y as f64;
    nb_log_rising(y, size.r) + yf * size.ln_r + nb_kernel(yf, log_mu, size) - ln_gamma(yf + 1.0)
}

/// `ln Gamma(y + r) - ln Gamma(r) - y ln r`, the part of the log-pmf that
/// depends on `r` alone.
pub(crate) fn nb_log_rising(y: u64, r: f64) -> f64 {
    if y <= 1 {
        0.0
    } else if y <= RISING_SUM_LIMIT && r > RISING_SUM_MIN_SIZE {
        (1..y).map(|k| (k as f64 / r).ln_1p()).sum::<f64>()
    } else {
        let yf = y as f64;
        ln_gamma(yf + r) - ln_gamma(r) - yf * r.ln()
    }
}

/// NB size `r = 1/psi` with its logarithm.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NbSize {
    pub r: f64,
    pub ln_r: f64,
}

impl NbSize {
    pub fn from_psi(psi: f64) -> Self {
        Self {
            r: psi.recip(),
            ln_r: -psi.ln(),
        }
    }
}

/// Counts from here on enter `psi` moves through per-cell differences of
/// [`nb_size_term_diff`] rather than a summed rising term.
pub(crate) const LARGE_COUNT: f64 = 1_048_576.0;

const STIRLING_MIN: f64 = 1e6;

/// `ln(1 + e^z)`.
#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln Gamma(x + a) - ln Gamma(x + b)`, kept accurate when both arguments are
/// so large that each log-gamma value dwarfs the difference.
pub(crate) fn ln_gamma_shift_diff(x: f64, a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (xa, xb) = (x + a, x + b);
    if xa.min(xb) < STIRLING_MIN {
        return ln_gamma(xa) - ln_gamma(xb);
    }
    let d = a - b;
    (xa - 0.5) * (d / xb).ln_1p() + d * (xb.ln() - 1.0) - d / (12.0 * xa * xb)
}

/// `ln Gamma(y + r1) - ln Gamma(r1) - ln Gamma(y + r0) + ln Gamma(r0)`.
pub(crate) fn nb_size_term_diff(y: f64, r1: f64, r0: f64) -> f64 {
    ln_gamma_shift_diff(y, r1, r0) - ln_gamma_shift_diff(0.0, r1, r0)
}

/// The `log mu`-dependent part of [`nb_log_pmf`], with `r = 1/psi` and
/// `z = log mu - ln r`: `-y ln(1 + r/mu) - r ln(1 + mu/r)`. The log-pmf is
/// this plus `ln Gamma(y + r) - ln Gamma(r) - ln y!`. Near `mu = y` it is of
/// order `r`, so differences stay accurate for very large counts.
#[inline]
pub(crate) fn nb_kernel(y: f64, log_mu: f64, size: NbSize) -> f64 {
    let z = log_mu - size.ln_r;
    -y * softplus(-z) - size.r * softplus(z)
}

pub fn phi_value(beta: &[f64], b_i: &[f64], basis_row: &[f64]) -> Result<f64> {
    if beta.len() != b_i.len() || beta.len() != basis_row.len() {
        return Err(Error::Dimension(format!(
            "phi terms: beta {}, b {}, basis {}",
            beta.len(),
            b_i.len(),
            basis_row.len()
        )));
    }
    Ok(phi_unchecked(beta, b_i, basis_row))
}

#[inline]
pub(crate) fn phi_unchecked(beta: &[f64], b_i: &[f64], basis_row: &[f64]) -> f64 {
    beta.iter()
        .zip(b_i)
        .zip(basis_row)
        .map(|((beta_q, b_q), p)| (beta_q + b_q) * p)
        .sum()
}

#[inline]
pub fn propagate_gamma(gamma_prev: f64, phi: f64, eta: f64) -> f64 {
    phi * gamma_prev + eta
}

#[inline]
pub fn log_mean(gamma: f64, lambda: bool, omega: f64) -> f64 {
    if lambda {
        gamma + omega
    } else {
        gamma
    }
}

/// Sum of NB log-probabilities over `t = 2..T`; day 1 is conditioned on.
pub fn panel_log_likelihood(
    panel: &CasePanel,
    params: &ModelParams,
    state: &LatentState,
) -> Result<f64> {
    let (n, t_count) = (panel.n_countries(), panel.n_days());
    state.check_dims(n, t_count, params.beta.len())?;
    if !(params.psi > 0.0) {
        return Err(Error::Domain("psi must be positive".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for t in 1..t_count {
            let eta = log_mean(state.gamma[(i, t)], state.lambda[(i, t)], state.omega[(i, t)]);
            total += nb_log_pmf_log_mean(panel.get(i, t), eta, params.psi);
        }
    }
    Ok(total)
}

/// Largest Poisson rate handed to the sampler; larger means saturate.
const MAX_POISSON_RATE: f64 = 1e18;

/// Draw from NB(mu, psi) as a gamma-Poisson mixture.
pub fn sample_nb<R: Rng + ?Sized>(rng: &mut R, mu: f64, psi: f64) -> u64 {
    if !(mu > 0.0) {
        return 0;
    }
    let r = psi.recip();
    let rate = Gamma::new(r, mu / r)
        .map(|g| g.sample(rng))
        .unwrap_or(mu)
        .min(MAX_POISSON_RATE);
    if !(rate > 0.0) {
        return 0;
    }
    match Poisson::new(rate) {
        Ok(p) => p.sample(rng) as u64,
        Err(_) => rate.round() as u64,
    }
}

/// Gaussian draw that tolerates a zero SD.
pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        mean + sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
    } else {
        mean
    }
}

/// Forward-simulate a panel and its latent state. Day 1 counts are zero.
pub fn simulate_panel(
    params: &ModelParams,
    n_countries: usize,
    t_count: usize,
    gamma_init: &[f64],
    seed: u64,
) -> Result<(CasePanel, LatentState)> {
    if n_countries < 1 || t_count < 2 {
        return Err(Error::Domain("simulation needs N >= 1 and T >= 2".into()));
    }
    if gamma_init.len() != n_countries {
        return Err(Error::Dimension(format!(
            "gamma_init has {} entries for {n_countries} countries",
            gamma_init.len()
        )));
    }
    params.validate()?;
    let basis = build_orthogonal_basis(t_count, params.degree())?;
    let terms = basis.n_terms();
    let outlier = Bernoulli::new(params.pi_outlier).map_err(|e| Error::Domain(e.to_string()))?;

    let mut state = LatentState {
        gamma: Grid::filled(n_countries, t_count, 0.0),
        b: Grid::filled(n_countries, terms, 0.0),
        lambda: Grid::filled(n_countries, t_count, false),
        omega: Grid::filled(n_countries, t_count, 0.0),
    };
    let mut counts = vec![vec![0u64; t_count]; n_countries];
    for i in 0..n_countries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for q in 0..terms {
            state.b[(i, q)] = normal(&mut rng, 0.0, params.sigma_b[q]);
        }
        let b_i = state.b.row(i).to_vec();
        let mut gamma = gamma_init[i];
        for t in 0..t_count {
            if t > 0 {
                let phi = phi_unchecked(&params.beta, &b_i, basis.row(t + 1));
                gamma = propagate_gamma(gamma, phi, normal(&mut rng, 0.0, params.sigma_eta));
            }
            state.gamma[(i, t)] = gamma;
            state.lambda[(i, t)] = outlier.sample(&mut rng);
            state.omega[(i, t)] = normal(&mut rng, 0.0, params.sigma_omega);
            if t > 0 {
                let eta = log_mean(gamma, state.lambda[(i, t)], state.omega[(i, t)]);
                counts[i][t] = sample_nb(&mut rng, eta.exp(), params.psi);
            }
        }
    }
    let ids = (0..n_countries).map(|i| format!("C{i:03}")).collect();
    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let panel = CasePanel::new(ids, start, counts)?;
    Ok((panel, state))
}

/// Basis matching a fitted panel and parameter vector.
pub fn basis_for(panel: &CasePanel, degree: usize) -> Result<OrthoBasis> {
    build_orthogonal_basis(panel.n_days(), degree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn poisson_log_pmf(y: u64, mu: f64) -> f64 {
        y as f64 * mu.ln() - mu - ln_gamma(y as f64 + 1.0)
    }

    #[test]
    fn geometric_zero() {
        let v = nb_log_pmf(0, 1.0, 1.0).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn poisson_limit() {
        let v = nb_log_pmf(3, 2.0, 1e-10).unwrap();
        assert!((v - poisson_log_pmf(3, 2.0)).abs() < 1e-6, "{v}");
    }

    #[test]
    fn poisson_limit_large_count_path() {
        let v = nb_log_pmf(500, 480.0, 1e-9).unwrap();
        assert!((v - poisson_log_pmf(500, 480.0)).abs() < 1e-4, "{v}");
    }

    #[test]
    fn pmf_sums_to_one() {
        let total: f64 = (0..=2000).map(|y| nb_log_pmf(y, 5.0, 0.5).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn both_rising_paths_agree() {
        for &(mu, psi) in &[(3.0, 0.2), (150.0, 0.01), (0.4, 2.0), (150.0, 1e-5)] {
            let r: f64 = 1.0 / psi;
            for y in [10u64, 64, 65, 300] {
                let direct = ln_gamma(y as f64 + r) - ln_gamma(r) - ln_gamma(y as f64 + 1.0)
                    + r * (r / (r + mu)).ln()
                    + y as f64 * (mu / (r + mu)).ln();
                let got = nb_log_pmf(y, mu, psi).unwrap();
                assert!((got - direct).abs() < 1e-9 * direct.abs().max(1.0), "{y} {mu} {psi}");
            }
        }
    }

    #[test]
    fn kernel_differences_match_pmf_differences() {
        for &(y, psi) in &[(0u64, 0.5), (7, 0.01), (5000, 0.001)] {
            let r = NbSize::from_psi(psi);
            for &(a, b) in &[(1.0, 2.5), (-3.0, 0.2), (8.0, 9.5)] {
                let want = nb_log_pmf(y, f64::exp(a), psi).unwrap()
                    - nb_log_pmf(y, f64::exp(b), psi).unwrap();
                let got = nb_kernel(y as f64, a, r) - nb_kernel(y as f64, b, r);
                assert!((want - got).abs() < 1e-8 * want.abs().max(1.0), "{y} {a} {b}");
            }
        }
    }

    // d/d eta of the kernel is r (y - mu) / (r + mu); the second derivative is
    // -(y + r) r mu / (r + mu)^2.
    #[test]
    fn kernel_differences_for_huge_counts() {
        for &(y, psi) in &[(1e15f64, 0.01), (3.7e17, 0.001), (2e6, 1e-6)] {
            let r = NbSize::from_psi(psi);
            for &offset in &[-2.0, 0.0, 1e-3] {
                let eta = y.ln() + offset;
                let mu = eta.exp();
                let h = 1e-6;
                let slope = r.r * (y - mu) / (r.r + mu);
                let curvature = -(y + r.r) * r.r * mu / (r.r + mu).powi(2);
                let want = h * slope + 0.5 * h * h * curvature;
                let got = nb_kernel(y, eta + h, r) - nb_kernel(y, eta, r);
                let tol = 1e-6 * want.abs() + 1e-9 * (1.0 + r.r.abs() * 1e-6);
                assert!((got - want).abs() < tol, "{y} {psi} {offset}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn ln_gamma_shift_diff_matches_direct_for_moderate_arguments() {
        for &(x, a, b) in &[(0.0, 3.5, 1.25), (10.0, 0.5, 20.0), (2e5, 7.0, 3.0), (2e6, 7.0, 3.0)] {
            let want = ln_gamma(x + a) - ln_gamma(x + b);
            let got = ln_gamma_shift_diff(x, a, b);
            assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{x} {a} {b}");
        }
    }

    proptest::proptest! {
        // Gamma(x + b + k) / Gamma(x + b) = prod_{j<k} (x + b + j).
        #[test]
        fn ln_gamma_shift_diff_matches_recurrence(
            log10_x in 6.0f64..18.0,
            b in 0.0f64..50.0,
            k in 1usize..20,
        ) {
            let x = 10f64.powf(log10_x);
            let want: f64 = (0..k).map(|j| (x + b + j as f64).ln()).sum();
            let got = ln_gamma_shift_diff(x, b + k as f64, b);
            proptest::prop_assert!((got - want).abs() < 1e-12 * want, "{} vs {}", got, want);
            let back = ln_gamma_shift_diff(x, b, b + k as f64);
            proptest::prop_assert!((back + want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn domain_errors() {
        assert!(nb_log_pmf(1, 0.0, 1.0).is_err());
        assert!(nb_log_pmf(1, 1.0, 0.0).is_err());
        assert!(nb_log_pmf(1, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn phi_sums() {
        let row = [1.0, 0.5, 0.0];
        assert_eq!(phi_value(&[1.0, 0.0, 0.0], &[0.0; 3], &[1.0, 0.3, -0.2]).unwrap(), 1.0);
        assert_eq!(phi_value(&[0.0, 1.0, 0.0], &[0.0; 3], &row).unwrap(), 0.5);
        let v = phi_value(&[0.0, 1.0, 0.0], &[0.0, 0.1, 0.0], &row).unwrap();
        assert!((v - 0.55).abs() < 1e-15);
        assert!(phi_value(&[1.0], &[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn gamma_propagation() {
        assert!((propagate_gamma(2.0, 0.5, 0.1) - 1.1).abs() < 1e-15);
        assert_eq!(propagate_gamma(123.0, 0.0, 0.3), 0.3);
        let phi: f64 = 0.9;
        let mut g = 2.0;
        for t in 2..=20 {
            g = propagate_gamma(g, phi, 0.0);
            assert!((g - phi.powi(t - 1) * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_mean_masks_omega() {
        assert_eq!(log_mean(1.0, false, 5.0), 1.0);
        assert_eq!(log_mean(1.0, true, 2.0), 3.0);
        assert_eq!(log_mean(0.0, true, 0.0).exp(), 1.0);
    }

    fn params(q: usize) -> ModelParams {
        ModelParams {
            beta: {
                let mut b = vec![0.0; q + 1];
                b[0] = 1.0;
                b
            },
            sigma_eta: 0.3,
            sigma_b: vec![0.01; q + 1],
            pi_outlier: 0.1,
            sigma_omega: 2.0,
            psi: 0.05,
        }
    }

    #[test]
    fn likelihood_one_term_and_additivity() {
        let p = params(0);
        let (panel, state) = simulate_panel(&p, 2, 2, &[1.0, 2.0], 3).unwrap();
        let total = panel_log_likelihood(&panel, &p, &state).unwrap();
        let single = |i: usize| {
            let eta = log_mean(state.gamma[(i, 1)], state.lambda[(i, 1)], state.omega[(i, 1)]);
            nb_log_pmf(panel.get(i, 1), eta.exp(), p.psi).unwrap()
        };
        assert!((total - (single(0) + single(1))).abs() < 1e-12);
    }

    #[test]
    fn likelihood_ignores_omega_without_outliers() {
        let p = params(1);
        let (panel, mut state) = simulate_panel(&p, 3, 10, &[1.0, 2.0, 0.5], 9).unwrap();
        state.lambda = Grid::filled(3, 10, false);
        let a = panel_log_likelihood(&panel, &p, &state).unwrap();
        state.omega = Grid::filled(3, 10, 4.0);
        let b = panel_log_likelihood(&panel, &p, &state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn likelihood_dimension_mismatch() {
        let p = params(1);
        let (panel, state) = simulate_panel(&p, 2, 6, &[1.0, 1.0], 1).unwrap();
        let (other, _) = simulate_panel(&p, 2, 7, &[1.0, 1.0], 1).unwrap();
        assert!(panel_log_likelihood(&other, &p, &state).is_err());
        assert!(panel_log_likelihood(&panel, &params(2), &state).is_err());
    }

    #[test]
    fn simulation_is_deterministic() {
        let p = params(2);
        let a = simulate_panel(&p, 4, 30, &[1.0; 4], 42).unwrap();
        let b = simulate_panel(&p, 4, 30, &[1.0; 4], 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_panel(&p, 4, 30, &[1.0; 4], 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn certain_outliers() {
        let mut p = params(1);
        p.pi_outlier = 1.0;
        let (_, state) = simulate_panel(&p, 3, 12, &[0.0; 3], 5).unwrap();
        assert!(state.lambda.iter().all(|&l| l));
    }

    #[test]
    fn first_day_is_zero() {
        let (panel, _) = simulate_panel(&params(1), 3, 5, &[3.0; 3], 5).unwrap();
        assert!((0..3).all(|i| panel.get(i, 0) == 0));
    }

    // Poisson(5) limit: mean 5, SE = sqrt(5 / n).
    #[test]
    fn simulator_poisson_limit_mean() {
        let tiny = 1e-12;
        let p = ModelParams {
            beta: vec![1.0, 0.0, 0.0],
            sigma_eta: tiny,
            sigma_b: vec![tiny; 3],
            pi_outlier: 0.0,
            sigma_omega: tiny,
            psi: 1e-8,
        };
        let (n, t) = (1000, 1001);
        let (panel, _) = simulate_panel(&p, n, t, &vec![5f64.ln(); n], 11).unwrap();
        let cells = (n * (t - 1)) as f64;
        let mean = (0..n).map(|i| panel.series(i)[1..].iter().sum::<u64>()).sum::<u64>() as f64 / cells;
        let se = (5.0 / cells).sqrt();
        assert!((mean - 5.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn nb_sampler_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_nb(&mut rng, 0.0, 0.1), 0);
    }

    // Stationary AR(1): corr(gamma_t, gamma_t+k) = beta0^k, SE of a correlation ~ (1 - rho^2)/sqrt(n).
    #[test]
    fn degree_zero_reduces_to_ar1() {
        let (beta0, sigma) = (0.8f64, 1.0);
        let p = ModelParams {
            beta: vec![beta0],
            sigma_eta: sigma,
            sigma_b: vec![1e-12],
            pi_outlier: 0.0,
            sigma_omega: 1e-12,
            psi: 0.1,
        };
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stationary_sd = sigma / (1.0 - beta0 * beta0).sqrt();
        let init: Vec<f64> = (0..n).map(|_| normal(&mut rng, 0.0, stationary_sd)).collect();
        let (_, state) = simulate_panel(&p, n, 8, &init, 21).unwrap();
        let column = |t: usize| -> Vec<f64> { (0..n).map(|i| state.gamma[(i, t)]).collect() };
        let corr = |a: &[f64], b: &[f64]| {
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ma, mb) = (m(a), m(b));
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let base = column(2);
        for k in 1..=4 {
            let rho = beta0.powi(k as i32);
            let got = corr(&base, &column(2 + k));
            let se = (1.0 - rho * rho) / (n as f64).sqrt();
            assert!((got - rho).abs() < 4.0 * se, "lag {k}: {got} vs {rho}");
        }
    }

    #[test]
    fn likelihood_peaks_near_true_dispersion() {
        let p = ModelParams {
            beta: vec![1.0, 0.0],
            sigma_eta: 0.1,
            sigma_b: vec![0.01, 0.01],
            pi_outlier: 0.0,
            sigma_omega: 1.0,
            psi: 0.05,
        };
        let (panel, state) = simulate_panel(&p, 20, 60, &[4.0; 20], 8).unwrap();
        let ll = |psi: f64| panel_log_likelihood(&panel, &ModelParams { psi, ..p.clone() }, &state).unwrap();
        let grid: Vec<f64> = (0..=200).map(|k| 0.005 * 1.03f64.powi(k)).collect();
        let best = grid.iter().copied().max_by(|a, b| ll(*a).total_cmp(&ll(*b))).unwrap();
        assert!(best > 0.025 && best < 0.1, "{best}");
        assert!(ll(best) > ll(best * 1.5) && ll(best) > ll(best / 1.5));
        assert!(ll(best).is_finite());
    }

    proptest::proptest! {
        #[test]
        fn iterated_form_matches_recursion(
            gamma1 in -10.0f64..10.0,
            steps in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..100),
        ) {
            let mut g = gamma1;
            for &(phi, eta) in &steps {
                g = propagate_gamma(g, phi, eta);
            }
            let last = steps.len();
            let tail_product = |from: usize| steps[from..].iter().map(|s| s.0).product::<f64>();
            let closed = tail_product(0) * gamma1
                + (0..last).map(|s| tail_product(s + 1) * steps[s].1).sum::<f64>();
            proptest::prop_assert!((g - closed).abs() < 1e-10, "{g} vs {closed}");
        }
    }
}
