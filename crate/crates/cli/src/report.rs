//! Static HTML report assembled from the artifacts under an output directory.
//!
//! The page is self-contained (inline CSS and SVG) and carries no timestamps,
//! so identical artifacts give an identical file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use epicast::cluster::DendrogramNode;
use epicast::forecast::ForecastTable;
use serde::Deserialize;

use crate::{read_file, write_file, CliError};

pub const FORECAST_ARTIFACT: &str = "forecast.csv";
pub const METRICS_ARTIFACT: &str = "validation/metrics.csv";
pub const PAIRS_ARTIFACT: &str = "validation/pairs.csv";
pub const CLUSTERS_ARTIFACT: &str = "cluster/clusters.csv";
pub const DENDROGRAM_ARTIFACT: &str = "cluster/dendrogram.json";
pub const NEWICK_ARTIFACT: &str = "cluster/dendrogram.nwk";

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const STYLE: &str = "body{font-family:sans-serif;margin:2em;max-width:60em;color:#222}\
table{border-collapse:collapse;margin:0 1.5em 1.5em 0;display:inline-table;vertical-align:top}\
caption{font-weight:bold;text-align:left}\
th,td{border:1px solid #ccc;padding:.2em .6em;text-align:right}\
th{background:#f2f2f2}.absent{color:#888;font-style:italic}\
svg text{font-size:11px;font-family:sans-serif}";

#[derive(Debug, Deserialize)]
struct MetricRow {
    horizon: usize,
    r: f64,
    accuracy: f64,
    ccc: f64,
}

#[derive(Debug, Deserialize)]
struct ClusterRow {
    country_id: String,
    cluster: usize,
}

/// What [`emit_report`] read and wrote, relative to the output directory.
#[derive(Debug, Default)]
pub struct EmittedReport {
    pub sections: usize,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn read_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>, CliError> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Core(e.into()))
}

/// Read whichever artifacts exist under `output_dir` and write
/// `report/index.html` plus copies of the data under `report/data/`.
pub fn emit_report(output_dir: &Path) -> Result<EmittedReport, CliError> {
    let load = |relative: &str| -> Result<Option<Vec<u8>>, CliError> {
        let path = output_dir.join(relative);
        if path.is_file() {
            read_file(&path).map(Some)
        } else {
            Ok(None)
        }
    };
    let forecast = load(FORECAST_ARTIFACT)?;
    let metrics = load(METRICS_ARTIFACT)?;
    let pairs = load(PAIRS_ARTIFACT)?;
    let clusters = load(CLUSTERS_ARTIFACT)?;
    let dendrogram = load(DENDROGRAM_ARTIFACT)?;
    let newick = load(NEWICK_ARTIFACT)?;
    if forecast.is_none() && metrics.is_none() && dendrogram.is_none() {
        return Err(epicast::Error::Domain(format!(
            "no forecast, validation or cluster artifacts under {}",
            output_dir.display()
        ))
        .into());
    }

    let mut emitted = EmittedReport::default();
    let mut data: Vec<(&str, &[u8])> = Vec::new();
    let mut body = String::new();

    body.push_str("<h2>Forecasts</h2>\n");
    match &forecast {
        Some(bytes) => {
            let table = ForecastTable::from_csv(bytes)?;
            forecast_section(&mut body, &table);
            emitted.sections += 1;
            emitted.inputs.push(FORECAST_ARTIFACT.into());
            data.push(("forecast.csv", bytes));
        }
        None => absent(&mut body, "No forecast artifact."),
    }

    body.push_str("<h2>Holdout validation</h2>\n");
    match &metrics {
        Some(bytes) => {
            metrics_section(&mut body, &read_csv::<MetricRow>(bytes)?);
            emitted.sections += 1;
            emitted.inputs.push(METRICS_ARTIFACT.into());
            data.push(("metrics.csv", bytes));
            if let Some(p) = &pairs {
                emitted.inputs.push(PAIRS_ARTIFACT.into());
                data.push(("pairs.csv", p));
            }
        }
        None => absent(&mut body, "No validation artifact."),
    }

    body.push_str("<h2>Clusters</h2>\n");
    match &dendrogram {
        Some(bytes) => {
            let tree: DendrogramNode = serde_json::from_slice(bytes).map_err(epicast::Error::from)?;
            let assignment: BTreeMap<String, usize> = match &clusters {
                Some(c) => read_csv::<ClusterRow>(c)?
                    .into_iter()
                    .map(|r| (r.country_id, r.cluster))
                    .collect(),
                None => BTreeMap::new(),
            };
            body.push_str(&dendrogram_svg(&tree, &assignment));
            body.push('\n');
            if !assignment.is_empty() {
                cluster_table(&mut body, &assignment);
            }
            emitted.sections += 1;
            emitted.inputs.push(DENDROGRAM_ARTIFACT.into());
            data.push(("dendrogram.json", bytes));
            if let Some(c) = &clusters {
                emitted.inputs.push(CLUSTERS_ARTIFACT.into());
                data.push(("clusters.csv", c));
            }
            if let Some(n) = &newick {
                emitted.inputs.push(NEWICK_ARTIFACT.into());
                data.push(("dendrogram.nwk", n));
            }
        }
        None => absent(&mut body, "No cluster artifact."),
    }

    body.push_str("<h2>Data</h2>\n<ul>\n");
    for (name, _) in &data {
        let _ = writeln!(body, "<li><a href=\"data/{0}\">{0}</a></li>", escape(name));
    }
    body.push_str("</ul>\n");

    let html = format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>epicast report</title>\n<style>{STYLE}</style>\n</head>\n<body>\n\
         <h1>epicast report</h1>\n{body}</body>\n</html>\n"
    );
    for (name, bytes) in &data {
        let relative = format!("report/data/{name}");
        write_file(&output_dir.join(&relative), bytes)?;
        emitted.outputs.push(relative);
    }
    write_file(&output_dir.join("report/index.html"), html.as_bytes())?;
    emitted.outputs.insert(0, "report/index.html".into());
    Ok(emitted)
}

fn absent(body: &mut String, message: &str) {
    let _ = writeln!(body, "<p class=\"absent\">{message}</p>");
}

fn forecast_section(body: &mut String, table: &ForecastTable) {
    for country in table.countries() {
        let _ = writeln!(
            body,
            "<table>\n<caption>{}</caption>\n<tr><th>date</th><th>h</th><th>median</th><th>95% band</th></tr>",
            escape(country)
        );
        for row in table.rows.iter().filter(|r| r.country_id == country) {
            let _ = writeln!(
                body,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{} to {}</td></tr>",
                row.date, row.horizon, row.median, row.lo95, row.hi95
            );
        }
        body.push_str("</table>\n");
    }
}

fn metrics_section(body: &mut String, rows: &[MetricRow]) {
    body.push_str("<table>\n<tr><th>h</th><th>r</th><th>C<sub>b</sub></th><th>CCC</th></tr>\n");
    for m in rows {
        let _ = writeln!(
            body,
            "<tr><td>{}</td><td>{:.3}</td><td>{:.3}</td><td>{:.3}</td></tr>",
            m.horizon, m.r, m.accuracy, m.ccc
        );
    }
    body.push_str("</table>\n");
}

fn cluster_table(body: &mut String, assignment: &BTreeMap<String, usize>) {
    let mut members: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, &c) in assignment {
        members.entry(c).or_default().push(id);
    }
    body.push_str("<table>\n<tr><th>cluster</th><th>countries</th></tr>\n");
    for (c, ids) in members {
        let _ = writeln!(
            body,
            "<tr><td>{}</td><td style=\"text-align:left\">{}</td></tr>",
            c,
            escape(&ids.join(", "))
        );
    }
    body.push_str("</table>\n");
}

const ROW_HEIGHT: f64 = 16.0;
const TREE_WIDTH: f64 = 420.0;
const MARGIN: f64 = 10.0;
const LABEL_WIDTH: f64 = 140.0;

struct Canvas<'a> {
    max_height: f64,
    next_leaf: usize,
    assignment: &'a BTreeMap<String, usize>,
    out: String,
}

impl Canvas<'_> {
    fn x(&self, height: f64) -> f64 {
        MARGIN + TREE_WIDTH * (1.0 - height / self.max_height)
    }

    /// Draws `node` and returns its anchor point.
    fn draw(&mut self, node: &DendrogramNode) -> (f64, f64) {
        let x = self.x(node.height);
        if node.children.is_empty() {
            let y = MARGIN + ROW_HEIGHT * (self.next_leaf as f64 + 0.5);
            self.next_leaf += 1;
            let label = node.label.as_deref().unwrap_or("");
            let (fill, suffix) = match self.assignment.get(label) {
                Some(&c) => (PALETTE[c.saturating_sub(1) % PALETTE.len()], format!(" ({c})")),
                None => ("#222", String::new()),
            };
            let _ = writeln!(
                self.out,
                "<text x=\"{:.2}\" y=\"{:.2}\" dominant-baseline=\"middle\" fill=\"{fill}\">{}{suffix}</text>",
                x + 4.0,
                y,
                escape(label)
            );
            return (x, y);
        }
        let anchors: Vec<(f64, f64)> = node.children.iter().map(|c| self.draw(c)).collect();
        let (lo, hi) = anchors
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
        let _ = writeln!(
            self.out,
            "<line x1=\"{x:.2}\" y1=\"{lo:.2}\" x2=\"{x:.2}\" y2=\"{hi:.2}\"/>"
        );
        for (cx, cy) in anchors {
            let _ = writeln!(
                self.out,
                "<line x1=\"{x:.2}\" y1=\"{cy:.2}\" x2=\"{cx:.2}\" y2=\"{cy:.2}\"/>"
            );
        }
        (x, (lo + hi) / 2.0)
    }
}

fn count_leaves(node: &DendrogramNode) -> usize {
    if node.children.is_empty() {
        1
    } else {
        node.children.iter().map(count_leaves).sum()
    }
}

/// Horizontal dendrogram: root on the left, leaves on the right, merge height
/// on the horizontal axis.
pub fn dendrogram_svg(tree: &DendrogramNode, assignment: &BTreeMap<String, usize>) -> String {
    let leaves = count_leaves(tree);
    let max_height = if tree.height > 0.0 { tree.height } else { 1.0 };
    let mut canvas = Canvas {
        max_height,
        next_leaf: 0,
        assignment,
        out: String::new(),
    };
    canvas.draw(tree);
    let width = 2.0 * MARGIN + TREE_WIDTH + LABEL_WIDTH;
    let height = 2.0 * MARGIN + ROW_HEIGHT * leaves as f64 + 20.0;
    let axis_y = height - MARGIN - 6.0;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n<g stroke=\"#444\" stroke-width=\"1\">\n{}</g>\n\
         <text x=\"{MARGIN}\" y=\"{axis_y:.2}\">height {max_height:.3}</text>\n\
         <text x=\"{:.2}\" y=\"{axis_y:.2}\" text-anchor=\"end\">0</text>\n</svg>",
        canvas.out,
        MARGIN + TREE_WIDTH
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(label: &str) -> DendrogramNode {
        DendrogramNode {
            height: 0.0,
            label: Some(label.into()),
            children: Vec::new(),
        }
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }

    #[test]
    fn svg_places_every_leaf_once() {
        let tree = DendrogramNode {
            height: 2.0,
            label: None,
            children: vec![
                DendrogramNode {
                    height: 1.0,
                    label: None,
                    children: vec![leaf("A"), leaf("B")],
                },
                leaf("C&D"),
            ],
        };
        let assignment = BTreeMap::from([("A".to_string(), 1), ("B".to_string(), 1)]);
        let svg = dendrogram_svg(&tree, &assignment);
        assert_eq!(svg.matches("<text").count(), 3 + 2);
        assert_eq!(svg.matches("<line").count(), 6);
        assert!(svg.contains(">A (1)</text>") && svg.contains(">C&amp;D</text>"));
        assert_eq!(svg, dendrogram_svg(&tree, &assignment));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(dir.path()),
            Err(CliError::Core(epicast::Error::Domain(_)))
        ));
    }
}
