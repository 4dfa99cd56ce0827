//! On-disk layout of posterior draws.
//!
//! A draws directory holds
//!
//! * `draws.csv`: one row per retained draw with columns `chain`, `iteration`,
//!   `log_posterior`, every scalar parameter (`beta0`, ..., `psi`), the random
//!   effects `b_<i>_<q>` and the launch levels `gamma_last_<i>`, where `i` is
//!   the country position in the manifest,
//! * `latent.csv`: `country_id,t,gamma_mean,gamma_sd,lambda_mean` per cell,
//! * `trace.csv`: `chain,iteration,log_posterior` along every phase,
//! * `manifest.json`: configuration, priors, country ids, panel hash and
//!   acceptance counts.
//!
//! Full latent states are not written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grid, ModelParams};
use crate::sampler::{
    AcceptanceLedger, ChainDraws, Draw, LatentSummary, McmcConfig, Param, PosteriorDraws, Priors,
};

pub const DRAWS_FILE: &str = "draws.csv";
pub const LATENT_FILE: &str = "latent.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawsManifest {
    pub config: McmcConfig,
    pub seed: u64,
    pub priors: Priors,
    pub country_ids: Vec<String>,
    pub t_count: usize,
    pub panel_hash: String,
    pub latent_draws: usize,
    /// Per chain, post-adaptation.
    pub acceptance: Vec<AcceptanceLedger>,
}

fn artifact_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn draw_header(n: usize, terms: usize) -> Vec<String> {
    let mut h: Vec<String> = ["chain", "iteration", "log_posterior"].map(String::from).to_vec();
    h.extend(Param::all(terms).iter().map(Param::to_string));
    for i in 0..n {
        h.extend((0..terms).map(|q| format!("b_{i}_{q}")));
    }
    h.extend((0..n).map(|i| format!("gamma_last_{i}")));
    h
}

pub fn save_draws(draws: &PosteriorDraws, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = draws.country_ids.len();
    let terms = draws.n_terms();
    let params = Param::all(terms);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(draw_header(n, terms))?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for d in &chain.draws {
            let mut rec = vec![c.to_string(), d.iteration.to_string(), d.log_posterior.to_string()];
            for p in &params {
                rec.push(p.get(&d.params)?.to_string());
            }
            rec.extend(d.b.iter().map(f64::to_string));
            rec.extend(d.gamma_last.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    write(dir.join(DRAWS_FILE), w)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["country_id", "t", "gamma_mean", "gamma_sd", "lambda_mean"])?;
    let l = &draws.latent;
    for (i, id) in draws.country_ids.iter().enumerate() {
        for t in 0..draws.t_count {
            w.write_record([
                id.clone(),
                (t + 1).to_string(),
                l.gamma_mean[(i, t)].to_string(),
                l.gamma_sd[(i, t)].to_string(),
                l.lambda_mean[(i, t)].to_string(),
            ])?;
        }
    }
    write(dir.join(LATENT_FILE), w)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["chain", "iteration", "log_posterior"])?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for (k, lp) in &chain.trace {
            w.write_record([c.to_string(), k.to_string(), lp.to_string()])?;
        }
    }
    write(dir.join(TRACE_FILE), w)?;

    let manifest = DrawsManifest {
        config: draws.config.clone(),
        seed: draws.config.seed,
        priors: draws.priors.clone(),
        country_ids: draws.country_ids.clone(),
        t_count: draws.t_count,
        panel_hash: draws.panel_hash.clone(),
        latent_draws: draws.latent.n_draws,
        acceptance: draws.chains.iter().map(|c| c.acceptance.clone()).collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

fn write(path: PathBuf, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(path, bytes)?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let bytes = fs::read(path).map_err(|e| artifact_error(path, e.to_string()))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| artifact_error(path, format!("cannot parse `{field}`")))
}

pub fn load_draws(dir: &Path) -> Result<PosteriorDraws> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DrawsManifest = serde_json::from_slice(
        &fs::read(&manifest_path).map_err(|e| artifact_error(&manifest_path, e.to_string()))?,
    )
    .map_err(|e| artifact_error(&manifest_path, e.to_string()))?;
    let n = manifest.country_ids.len();
    let t_count = manifest.t_count;
    let terms = manifest.config.degree + 1;
    let params = Param::all(terms);

    let path = dir.join(DRAWS_FILE);
    let (header, rows) = read_csv(&path)?;
    let expected = draw_header(n, terms);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(artifact_error(&path, "header does not match the manifest"));
    }
    let mut chains: Vec<ChainDraws> = manifest
        .acceptance
        .iter()
        .map(|a| ChainDraws {
            draws: Vec::new(),
            acceptance: a.clone(),
            trace: Vec::new(),
        })
        .collect();
    for row in &rows {
        let f: Vec<&str> = row.iter().collect();
        let chain: usize = parse(&path, f[0])?;
        let values: Vec<f64> = f[2..].iter().map(|s| parse(&path, s)).collect::<Result<_>>()?;
        let (log_posterior, rest) = (values[0], &values[1..]);
        let (scalars, rest) = rest.split_at(params.len());
        let (b, gamma_last) = rest.split_at(n * terms);
        let mut p = ModelParams {
            beta: vec![0.0; terms],
            sigma_eta: 0.0,
            sigma_b: vec![0.0; terms],
            pi_outlier: 0.0,
            sigma_omega: 0.0,
            psi: 0.0,
        };
        for (param, &v) in params.iter().zip(scalars) {
            match *param {
                Param::Beta(q) => p.beta[q] = v,
                Param::SigmaB(q) => p.sigma_b[q] = v,
                Param::SigmaEta => p.sigma_eta = v,
                Param::Pi => p.pi_outlier = v,
                Param::SigmaOmega => p.sigma_omega = v,
                Param::Psi => p.psi = v,
            }
        }
        let slot = chains
            .get_mut(chain)
            .ok_or_else(|| artifact_error(&path, format!("chain {chain} not in manifest")))?;
        slot.draws.push(Draw {
            iteration: parse(&path, f[1])?,
            params: p,
            b: Grid::from_rows(b.chunks(terms).map(<[f64]>::to_vec).collect())?,
            gamma_last: gamma_last.to_vec(),
            log_posterior,
            state: None,
        });
    }

    let path = dir.join(TRACE_FILE);
    let (_, rows) = read_csv(&path)?;
    for row in &rows {
        let chain: usize = parse(&path, &row[0])?;
        let slot = chains
            .get_mut(chain)
            .ok_or_else(|| artifact_error(&path, format!("chain {chain} not in manifest")))?;
        slot.trace.push((parse(&path, &row[1])?, parse(&path, &row[2])?));
    }

    let path = dir.join(LATENT_FILE);
    let (_, rows) = read_csv(&path)?;
    if rows.len() != n * t_count {
        return Err(artifact_error(&path, format!("expected {} rows, found {}", n * t_count, rows.len())));
    }
    let mut latent = LatentSummary {
        n_draws: manifest.latent_draws,
        gamma_mean: Grid::filled(n, t_count, 0.0),
        gamma_sd: Grid::filled(n, t_count, 0.0),
        lambda_mean: Grid::filled(n, t_count, 0.0),
    };
    for (k, row) in rows.iter().enumerate() {
        let (i, t) = (k / t_count, k % t_count);
        if row[0] != manifest.country_ids[i] || parse::<usize>(&path, &row[1])? != t + 1 {
            return Err(artifact_error(&path, format!("row {} out of order", k + 1)));
        }
        latent.gamma_mean[(i, t)] = parse(&path, &row[2])?;
        latent.gamma_sd[(i, t)] = parse(&path, &row[3])?;
        latent.lambda_mean[(i, t)] = parse(&path, &row[4])?;
    }

    Ok(PosteriorDraws {
        config: manifest.config,
        priors: manifest.priors,
        country_ids: manifest.country_ids,
        t_count,
        panel_hash: manifest.panel_hash,
        chains,
        latent,
    })
}
