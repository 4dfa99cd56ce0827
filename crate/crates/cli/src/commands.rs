//! One function per subcommand. Each reads its inputs from files, writes its
//! outputs under the output directory and finishes with a run manifest.

use std::path::{Path, PathBuf};

use chrono::{Local, NaiveDate};
use epicast::artifacts::{load_draws, save_draws};
use epicast::cluster::{cluster_trajectories, labels_csv, DistanceMatrix};
use epicast::forecast::{forecast_panel_with, ForecastOptions};
use epicast::ingest::{
    clean_series_with, fetch_feed, parse_case_table, CasePanel, CleanOptions, CleaningReport,
    ColumnMap, FeedSource, FetchMode,
};
use epicast::sampler::{fit_mcmc, summarize_posterior, Param, PosteriorDraws};
use epicast::validate::{holdout_split, score_holdout, HoldoutReport};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{digest_path, sha256_hex, InputDigest, RunManifest};
use crate::report::emit_report;
use crate::{
    read_file, write_file, CleanArgs, ClusterArgs, Cli, CliError, Command, FetchArgs, FitArgs,
    ForecastArgs, ValidateArgs,
};

pub const PANEL_FILE: &str = "panel.csv";
pub const DRAWS_DIR: &str = "draws";
pub const VALIDATION_DIR: &str = "validation";
pub const CLUSTER_DIR: &str = "cluster";

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    }
    match cli.command {
        Command::Fetch(args) => fetch(config, args),
        Command::Fit(args) => fit(config, args),
        Command::Forecast(args) => forecast(config, args),
        Command::Validate(args) => validate(config, args),
        Command::Cluster(args) => cluster(config, args),
        Command::Report => report(config),
    }
}

fn display(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

fn digest(role: &str, path: &Path) -> Result<InputDigest, CliError> {
    Ok(InputDigest {
        role: role.into(),
        path: display(path),
        sha256: digest_path(path)?,
    })
}

/// Writes `name` under `dir` and records it relative to the output directory.
struct Outputs<'a> {
    root: &'a Path,
    written: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(root: &'a Path) -> Self {
        Self {
            root,
            written: Vec::new(),
        }
    }

    fn put(&mut self, relative: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_file(&self.root.join(relative), bytes)?;
        self.written.push(relative.to_string());
        Ok(())
    }
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut json = serde_json::to_vec_pretty(value).map_err(epicast::Error::from)?;
    json.push(b'\n');
    Ok(json)
}

fn today_or_now(today: Option<NaiveDate>) -> NaiveDate {
    today.unwrap_or_else(|| Local::now().date_naive())
}

fn clean_raw(bytes: &[u8], clean: &CleanArgs) -> Result<(CasePanel, CleaningReport, NaiveDate), CliError> {
    let today = today_or_now(clean.today);
    let records = parse_case_table(bytes, &ColumnMap::default())?;
    let options = CleanOptions { start: clean.start };
    let (panel, report) = clean_series_with(&records, today, &options)?;
    Ok((panel, report, today))
}

fn is_panel_csv(bytes: &[u8]) -> bool {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let first = String::from_utf8_lossy(first);
    let columns: Vec<&str> = first.trim().trim_start_matches('\u{feff}').split(',').collect();
    columns == ["country_id", "date", "cases"]
}

/// A cleaned panel, or a raw table cleaned on the fly. Returns the day used for
/// cleaning when the input was raw.
fn load_panel(path: &Path, clean: &CleanArgs) -> Result<(CasePanel, Option<NaiveDate>), CliError> {
    let bytes = read_file(path)?;
    if is_panel_csv(&bytes) {
        Ok((CasePanel::from_csv(&bytes)?, None))
    } else {
        let (panel, report, today) = clean_raw(&bytes, clean)?;
        info!(
            "cleaned {}: {} countries x {} days, {} negative counts clamped",
            display(path),
            panel.n_countries(),
            panel.n_days(),
            report.negative_clamped
        );
        Ok((panel, Some(today)))
    }
}

fn fetch(mut config: RunConfig, args: FetchArgs) -> Result<(), CliError> {
    if let Some(dir) = args.cache_dir {
        config.cache_dir = dir;
    }
    if let Some(url) = args.url {
        config.feed_url = url;
    }
    config.validate()?;
    let (bytes, input) = match &args.input {
        Some(path) => {
            let bytes = read_file(path)?;
            let d = InputDigest {
                role: "raw".into(),
                path: display(path),
                sha256: sha256_hex(&bytes),
            };
            (bytes, d)
        }
        None => {
            let mode = if args.offline { FetchMode::Offline } else { FetchMode::Online };
            let feed = fetch_feed(&config.feed_url, &config.cache_dir, mode)?;
            if let FeedSource::Cache { retrieved_at } = feed.source {
                info!("using cached feed retrieved at {retrieved_at}");
            }
            let d = InputDigest {
                role: "raw".into(),
                path: config.feed_url.clone(),
                sha256: sha256_hex(&feed.bytes),
            };
            (feed.bytes, d)
        }
    };
    let (panel, cleaning, today) = clean_raw(&bytes, &args.clean)?;
    let mut out = Outputs::new(&config.output_dir);
    out.put(PANEL_FILE, &panel.to_csv()?)?;
    out.put("cleaning.json", &pretty_json(&cleaning)?)?;
    println!(
        "panel: {} countries x {} days ({} to {}), {} rows dropped for {today}, {} negative counts clamped",
        panel.n_countries(),
        panel.n_days(),
        panel.start(),
        panel.end(),
        cleaning.dropped_today,
        cleaning.negative_clamped
    );
    RunManifest::new("fetch", &config, None, Some(today), vec![input], out.written)
        .write(&config.output_dir)
}

#[derive(Serialize)]
struct ParamRow {
    parameter: String,
    mean: f64,
    ci_low: f64,
    ci_high: f64,
    rhat: f64,
}

fn summary_rows(draws: &PosteriorDraws) -> Result<Vec<ParamRow>, CliError> {
    Param::all(draws.n_terms())
        .into_iter()
        .map(|p| {
            let s = summarize_posterior(draws, p)?;
            Ok(ParamRow {
                parameter: p.to_string(),
                mean: s.mean,
                ci_low: s.ci_low,
                ci_high: s.ci_high,
                rhat: draws.rhat(p)?,
            })
        })
        .collect()
}

fn summary_csv(rows: &[ParamRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(epicast::Error::from)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Core(epicast::Error::Io(e.into_error())))
}

fn fit(mut config: RunConfig, args: FitArgs) -> Result<(), CliError> {
    let m = &mut config.mcmc;
    let overrides = [
        (&mut m.degree, args.degree),
        (&mut m.n_chains, args.chains),
        (&mut m.n_adapt, args.adapt),
        (&mut m.n_burnin, args.burnin),
        (&mut m.n_iter, args.iter),
        (&mut m.thin, args.thin),
    ];
    for (slot, value) in overrides {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    config.validate()?;
    let input = args.input.unwrap_or_else(|| config.output_dir.join(PANEL_FILE));
    let (mut panel, today) = load_panel(&input, &args.clean)?;
    if let Some(days) = args.holdout {
        panel = holdout_split(&panel, days)?;
    }
    info!(
        "fitting {} countries x {} days, {} chains x {} iterations",
        panel.n_countries(),
        panel.n_days(),
        config.mcmc.n_chains,
        config.mcmc.total_iterations()
    );
    let draws = fit_mcmc(&panel, &config.mcmc)?;

    let dir = config.output_dir.join(DRAWS_DIR);
    save_draws(&draws, &dir)?;
    let rows = summary_rows(&draws)?;
    let mut out = Outputs::new(&config.output_dir);
    out.put(&format!("{DRAWS_DIR}/{PANEL_FILE}"), &panel.to_csv()?)?;
    out.put(&format!("{DRAWS_DIR}/summary.csv"), &summary_csv(&rows)?)?;
    out.written.insert(0, DRAWS_DIR.to_string());

    println!("{:<12} {:>10} {:>10} {:>10} {:>7}", "parameter", "mean", "2.5%", "97.5%", "R-hat");
    for r in &rows {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>7.3}",
            r.parameter, r.mean, r.ci_low, r.ci_high, r.rhat
        );
    }
    let mut inputs = vec![digest("panel", &input)?];
    if let Some(days) = args.holdout {
        inputs.push(InputDigest {
            role: "holdout_days".into(),
            path: String::new(),
            sha256: sha256_hex(days.to_string().as_bytes()),
        });
    }
    RunManifest::new("fit", &config, Some(config.mcmc.seed), today, inputs, out.written)
        .write(&config.output_dir)
}

/// Draws plus the panel they were fitted on, both read back from disk.
fn load_fitted(dir: &Path) -> Result<(PosteriorDraws, CasePanel), CliError> {
    let draws = load_draws(dir)?;
    let panel = CasePanel::from_csv(&read_file(&dir.join(PANEL_FILE))?)?;
    draws.check_panel(&panel)?;
    Ok((draws, panel))
}

fn forecast(mut config: RunConfig, args: ForecastArgs) -> Result<(), CliError> {
    if let Some(h) = args.horizon {
        config.horizon = h;
    }
    config.validate()?;
    let dir = args.draws.unwrap_or_else(|| config.output_dir.join(DRAWS_DIR));
    let (draws, panel) = load_fitted(&dir)?;
    let options = ForecastOptions {
        horizon: config.horizon,
        include_outliers: !args.trend,
        seed: args.seed.unwrap_or(draws.config.seed),
    };
    let table = forecast_panel_with(&draws, &panel, &draws.basis()?, &options)?;
    let mut out = Outputs::new(&config.output_dir);
    out.put("forecast.csv", &table.to_csv()?)?;
    let mut json = table.to_json()?;
    json.push(b'\n');
    out.put("forecast.json", &json)?;
    println!(
        "forecast: {} countries, {} days past {}",
        panel.n_countries(),
        config.horizon,
        panel.end()
    );
    let mut inputs = vec![digest("draws", &dir)?];
    if args.trend {
        inputs.push(InputDigest {
            role: "trend_only".into(),
            path: String::new(),
            sha256: sha256_hex(b"true"),
        });
    }
    RunManifest::new("forecast", &config, Some(options.seed), None, inputs, out.written)
        .write(&config.output_dir)
}

fn validate(mut config: RunConfig, args: ValidateArgs) -> Result<(), CliError> {
    if let Some(h) = args.horizon {
        config.horizon = h;
    }
    if let Some(seed) = args.seed {
        config.mcmc.seed = seed;
    }
    config.validate()?;
    let input = args.input.unwrap_or_else(|| config.output_dir.join(PANEL_FILE));
    let (panel, today) = load_panel(&input, &args.clean)?;
    let train = holdout_split(&panel, config.horizon)?;
    let mut out = Outputs::new(&config.output_dir);
    let mut inputs = vec![digest("panel", &input)?];
    let (draws, seed) = match &args.reuse_draws {
        Some(dir) => {
            let draws = load_draws(dir)?;
            draws.check_panel(&train).map_err(|_| {
                epicast::Error::State(format!(
                    "draws in {} were not fitted on this panel minus its last {} days",
                    display(dir),
                    config.horizon
                ))
            })?;
            inputs.push(digest("draws", dir)?);
            let seed = draws.config.seed;
            (draws, seed)
        }
        None => {
            let draws = fit_mcmc(&train, &config.mcmc)?;
            let dir = config.output_dir.join(VALIDATION_DIR).join(DRAWS_DIR);
            save_draws(&draws, &dir)?;
            out.written.push(format!("{VALIDATION_DIR}/{DRAWS_DIR}"));
            (draws, config.mcmc.seed)
        }
    };
    let report: HoldoutReport = score_holdout(&panel, &train, &draws, config.horizon)?;
    out.put(&format!("{VALIDATION_DIR}/metrics.csv"), &report.metrics_csv()?)?;
    out.put(&format!("{VALIDATION_DIR}/pairs.csv"), &report.pairs_csv()?)?;
    out.put(&format!("{VALIDATION_DIR}/forecast.csv"), &report.forecasts.to_csv()?)?;
    let mut json = report.to_json()?;
    json.push(b'\n');
    out.put(&format!("{VALIDATION_DIR}/validation.json"), &json)?;

    println!("{:>7} {:>8} {:>8} {:>8}", "horizon", "r", "C_b", "CCC");
    for m in &report.metrics {
        println!("{:>7} {:>8.4} {:>8.4} {:>8.4}", m.horizon, m.pearson, m.accuracy, m.ccc);
    }
    RunManifest::new("validate", &config, Some(seed), today, inputs, out.written)
        .write(&config.output_dir)
}

fn distances_csv(dm: &DistanceMatrix) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["country_id".to_string()];
    header.extend(dm.labels().iter().cloned());
    w.write_record(&header).map_err(epicast::Error::from)?;
    for (label, row) in dm.labels().iter().zip(dm.rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(epicast::Error::from)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Core(epicast::Error::Io(e.into_error())))
}

fn cluster(mut config: RunConfig, args: ClusterArgs) -> Result<(), CliError> {
    if let Some(w) = args.window {
        config.cluster_window = w;
    }
    if let Some(k) = args.k {
        config.cluster_k = k;
    }
    config.validate()?;
    let dir: PathBuf = args.draws.unwrap_or_else(|| config.output_dir.join(DRAWS_DIR));
    let draws = load_draws(&dir)?;
    let result = cluster_trajectories(
        &draws.latent,
        &draws.country_ids,
        config.cluster_window,
        config.cluster_k,
    )?;
    let mut out = Outputs::new(&config.output_dir);
    out.put(
        &format!("{CLUSTER_DIR}/clusters.csv"),
        &labels_csv(&draws.country_ids, &result.clusters)?,
    )?;
    let mut json = result.dendrogram.to_json()?;
    json.push(b'\n');
    out.put(&format!("{CLUSTER_DIR}/dendrogram.json"), &json)?;
    let mut newick = result.dendrogram.to_newick();
    newick.push('\n');
    out.put(&format!("{CLUSTER_DIR}/dendrogram.nwk"), newick.as_bytes())?;
    out.put(&format!("{CLUSTER_DIR}/distances.csv"), &distances_csv(&result.distances)?)?;
    println!(
        "cluster: {} countries into {} clusters over the last {} days",
        draws.country_ids.len(),
        result.clusters.iter().max().copied().unwrap_or(0),
        config.cluster_window.min(draws.t_count)
    );
    RunManifest::new("cluster", &config, None, None, vec![digest("draws", &dir)?], out.written)
        .write(&config.output_dir)
}

fn report(config: RunConfig) -> Result<(), CliError> {
    config.validate()?;
    let emitted = emit_report(&config.output_dir)?;
    println!(
        "report: {} with {} of 3 sections",
        display(&config.output_dir.join("report/index.html")),
        emitted.sections
    );
    let inputs = emitted
        .inputs
        .iter()
        .map(|p| digest("artifact", &config.output_dir.join(p)))
        .collect::<Result<Vec<_>, _>>()?;
    RunManifest::new("report", &config, None, None, inputs, emitted.outputs)
        .write(&config.output_dir)
}
