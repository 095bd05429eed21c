//! Run logs, per-epoch summaries, rank diagnostics and chart output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One line of the rollout log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub epoch: usize,
    pub group: usize,
    pub rollout: usize,
    pub adapter: usize,
    #[serde(default)]
    pub parent: usize,
    pub reward: f64,
    pub num_tokens: usize,
    pub phase1_tokens: usize,
    pub phase2_tokens: usize,
    pub u_i: f64,
    #[serde(default)]
    pub u_mean: f64,
    #[serde(default)]
    pub u_std: f64,
    /// `None` when the temperature solve was degenerate.
    pub beta: Option<f64>,
    pub gamma_eff: f64,
    #[serde(default)]
    pub shaped_advantage: f64,
    pub streaming_mi_stopped: bool,
    pub streaming_mi_stop_step: Option<usize>,
    #[serde(default)]
    pub gate_window_mi: Option<f64>,
    /// Family label; present only for correct (reward > 0) rollouts.
    pub family: Option<String>,
    #[serde(default)]
    pub mean_mi: f64,
    #[serde(default)]
    pub candidate: String,
    #[serde(default)]
    pub constant_group: bool,
    #[serde(default)]
    pub new_best: bool,
}

impl RolloutRecord {
    pub fn is_correct(&self) -> bool {
        self.reward > 0.0
    }
}

/// Per-epoch ensemble diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub epoch: usize,
    pub mean_block_cosine: f64,
    pub nuclear_norms: Vec<f64>,
    pub nnm_loss: f64,
    /// Token-weighted mean per-token MI over the epoch's rollouts.
    pub mean_token_mi: f64,
    pub pg_loss: f64,
    pub skipped_groups: usize,
    pub nnm_nonunique: bool,
    pub gate_threshold: Option<f64>,
}

pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const ENSEMBLE_FILE: &str = "ensemble.jsonl";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rollouts: Vec<RolloutRecord>,
    pub ensemble: Vec<EnsembleRecord>,
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

impl RunLog {
    pub fn rollouts_jsonl(&self) -> Result<String> {
        to_jsonl(&self.rollouts)
    }

    pub fn ensemble_jsonl(&self) -> Result<String> {
        to_jsonl(&self.ensemble)
    }

    /// SHA-256 over both JSON-lines files, hex encoded.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.rollouts_jsonl()?.as_bytes());
        h.update(b"\0");
        h.update(self.ensemble_jsonl()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `rollouts.jsonl` and `ensemble.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ROLLOUTS_FILE), self.rollouts_jsonl()?)?;
        fs::write(dir.join(ENSEMBLE_FILE), self.ensemble_jsonl()?)?;
        Ok(())
    }

    /// Reads a run directory, or a bare rollouts file. Unknown fields are
    /// ignored; a missing ensemble file yields no ensemble records.
    pub fn read(path: &Path) -> Result<Self> {
        let (rollouts_path, ensemble_path) = if path.is_dir() {
            (path.join(ROLLOUTS_FILE), Some(path.join(ENSEMBLE_FILE)))
        } else {
            (path.to_path_buf(), None)
        };
        let rollouts = read_jsonl(&rollouts_path)?;
        let ensemble = match ensemble_path {
            Some(p) if p.exists() => read_jsonl(&p)?,
            _ => Vec::new(),
        };
        Ok(Self { rollouts, ensemble })
    }

    pub fn epochs(&self) -> usize {
        self.rollouts
            .iter()
            .map(|r| r.epoch + 1)
            .chain(self.ensemble.iter().map(|e| e.epoch + 1))
            .max()
            .unwrap_or(0)
    }
}

/// Shannon entropy in bits of a label histogram; `None` when it is empty.
pub fn entropy_bits_of_counts<'a>(counts: impl IntoIterator<Item = &'a usize>) -> Option<f64> {
    let counts: Vec<usize> = counts.into_iter().copied().filter(|c| *c > 0).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    Some(h.max(0.0))
}

/// Entropy in bits of the empirical distribution of `labels`.
pub fn family_entropy<S: AsRef<str>>(labels: &[S]) -> Option<f64> {
    let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *hist.entry(l.as_ref()).or_default() += 1;
    }
    entropy_bits_of_counts(hist.values())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub rollouts: usize,
    pub correct: usize,
    /// Family histogram over correct rollouts.
    pub families: BTreeMap<String, usize>,
    /// `None` when no rollout was correct.
    pub entropy_bits: Option<f64>,
    /// Best reward seen up to and including this epoch.
    pub r_max: f64,
    pub new_best_events: usize,
    pub mean_mi: f64,
    pub mean_tokens: f64,
    pub firing_rate: f64,
}

/// Summaries for every epoch present in the log. New-best events are counted
/// against a running maximum that starts at 0, replayed in log order.
pub fn epoch_summaries(log: &RunLog) -> Vec<EpochSummary> {
    let epochs = log.epochs();
    let mut out = Vec::with_capacity(epochs);
    let mut running = 0.0_f64;
    for epoch in 0..epochs {
        let rows: Vec<&RolloutRecord> = log.rollouts.iter().filter(|r| r.epoch == epoch).collect();
        let mut families = BTreeMap::new();
        let mut new_best = 0;
        for r in &rows {
            if r.reward > running {
                running = r.reward;
                new_best += 1;
            }
            if r.is_correct() {
                let label = r.family.clone().unwrap_or_else(|| crate::envs::OTHER_FAMILY.into());
                *families.entry(label).or_insert(0) += 1;
            }
        }
        let tokens: usize = rows.iter().map(|r| r.num_tokens).sum();
        let weighted_mi: f64 = rows.iter().map(|r| r.mean_mi * r.num_tokens as f64).sum();
        let fired = rows.iter().filter(|r| r.streaming_mi_stopped).count();
        let n = rows.len();
        out.push(EpochSummary {
            epoch,
            rollouts: n,
            correct: families.values().sum(),
            entropy_bits: entropy_bits_of_counts(families.values()),
            families,
            r_max: running,
            new_best_events: new_best,
            mean_mi: if tokens == 0 { 0.0 } else { weighted_mi / tokens as f64 },
            mean_tokens: if n == 0 { 0.0 } else { tokens as f64 / n as f64 },
            firing_rate: if n == 0 { 0.0 } else { fired as f64 / n as f64 },
        });
    }
    out
}

/// Number of strict improvements of the running best reward, counted in one
/// pass over the records.
pub fn count_new_best_events(records: &[RolloutRecord]) -> usize {
    let mut best = 0.0_f64;
    let mut count = 0;
    for r in records {
        if r.reward > best {
            best = r.reward;
            count += 1;
        }
    }
    count
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    epoch: usize,
    rollouts: usize,
    correct: usize,
    entropy_bits: Option<f64>,
    r_max: f64,
    new_best_events: usize,
    mean_mi: f64,
    mean_tokens: f64,
    firing_rate: f64,
    families: &'a str,
}

fn families_field(families: &BTreeMap<String, usize>) -> String {
    families
        .iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// CSV text of the summaries; `entropy_bits` is empty when undefined.
pub fn summaries_csv(summaries: &[EpochSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in summaries {
        let fam = families_field(&s.families);
        w.serialize(SummaryRow {
            epoch: s.epoch,
            rollouts: s.rollouts,
            correct: s.correct,
            entropy_bits: s.entropy_bits,
            r_max: s.r_max,
            new_best_events: s.new_best_events,
            mean_mi: s.mean_mi,
            mean_tokens: s.mean_tokens,
            firing_rate: s.firing_rate,
            families: &fam,
        })?;
    }
    if summaries.is_empty() {
        w.write_record([
            "epoch",
            "rollouts",
            "correct",
            "entropy_bits",
            "r_max",
            "new_best_events",
            "mean_mi",
            "mean_tokens",
            "firing_rate",
            "families",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_summaries_csv(path: &Path, summaries: &[EpochSummary]) -> Result<()> {
    fs::write(path, summaries_csv(summaries)?)?;
    Ok(())
}

#[derive(Deserialize)]
struct SummaryRowOwned {
    epoch: usize,
    entropy_bits: Option<f64>,
    r_max: f64,
}

/// `(epoch, entropy_bits, r_max)` rows of a summary CSV.
pub fn parse_summary_series(text: &str) -> Result<Vec<(usize, Option<f64>, f64)>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: SummaryRowOwned = row?;
        out.push((row.epoch, row.entropy_bits, row.r_max));
    }
    Ok(out)
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties. `None` for fewer
/// than two points, mismatched lengths or zero rank variance.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Length-versus-reward rank correlations over correct rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRewardDiagnostic {
    pub correct_rollouts: usize,
    pub rho_think: Option<f64>,
    pub rho_code: Option<f64>,
    pub rho_total: Option<f64>,
}

pub fn length_reward_diagnostic(
    records: &[RolloutRecord],
    epochs: Option<RangeInclusive<usize>>,
) -> LengthRewardDiagnostic {
    let rows: Vec<&RolloutRecord> = records
        .iter()
        .filter(|r| r.is_correct())
        .filter(|r| epochs.as_ref().is_none_or(|e| e.contains(&r.epoch)))
        .collect();
    let reward: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    let col = |f: fn(&RolloutRecord) -> usize| -> Vec<f64> {
        rows.iter().map(|r| f(r) as f64).collect()
    };
    LengthRewardDiagnostic {
        correct_rollouts: rows.len(),
        rho_think: spearman_rho(&col(|r| r.phase1_tokens), &reward),
        rho_code: spearman_rho(&col(|r| r.phase2_tokens), &reward),
        rho_total: spearman_rho(&col(|r| r.num_tokens), &reward),
    }
}

/// Epoch windows of the diagnostic table: the first three epochs, then all.
pub const DIAGNOSE_WINDOWS: [(&str, Option<(usize, usize)>); 2] =
    [("ep0-2", Some((0, 2))), ("all", None)];

pub const DIAGNOSE_COLUMNS: [&str; 7] = [
    "run",
    "ep0-2_rho_think",
    "ep0-2_rho_code",
    "ep0-2_rho_total",
    "all_rho_think",
    "all_rho_code",
    "all_rho_total",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRow {
    pub run: String,
    /// One diagnostic per entry of [`DIAGNOSE_WINDOWS`].
    pub windows: Vec<LengthRewardDiagnostic>,
}

pub fn diagnose_row(run: &str, log: &RunLog) -> DiagnoseRow {
    DiagnoseRow {
        run: run.to_string(),
        windows: DIAGNOSE_WINDOWS
            .iter()
            .map(|(_, w)| length_reward_diagnostic(&log.rollouts, w.map(|(a, b)| a..=b)))
            .collect(),
    }
}

/// Formats a correlation, or `undefined`.
pub fn format_rho(rho: Option<f64>) -> String {
    rho.map(|r| format!("{r:.4}")).unwrap_or_else(|| "undefined".into())
}

fn row_cells(row: &DiagnoseRow) -> Vec<String> {
    let mut cells = vec![row.run.clone()];
    for w in &row.windows {
        cells.push(format_rho(w.rho_think));
        cells.push(format_rho(w.rho_code));
        cells.push(format_rho(w.rho_total));
    }
    cells
}

pub fn diagnose_csv(rows: &[DiagnoseRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DIAGNOSE_COLUMNS)?;
    for row in rows {
        w.write_record(row_cells(row))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fixed-width text rendering of the diagnostic table.
pub fn diagnose_text(rows: &[DiagnoseRow]) -> String {
    let table: Vec<Vec<String>> = std::iter::once(DIAGNOSE_COLUMNS.map(String::from).to_vec())
        .chain(rows.iter().map(row_cells))
        .collect();
    let widths: Vec<usize> = (0..DIAGNOSE_COLUMNS.len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// A run to draw: label, summaries and whether it is the baseline.
#[derive(Clone, Debug)]
pub struct PlotSeries {
    pub label: String,
    pub baseline: bool,
    pub summaries: Vec<EpochSummary>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn embedded_data(series: &[PlotSeries]) -> Result<String> {
    let mut out = String::from("<metadata>\n");
    for s in series {
        writeln!(
            out,
            "<series label=\"{}\" baseline=\"{}\"><![CDATA[\n{}]]></series>",
            xml_escape(&s.label),
            s.baseline,
            summaries_csv(&s.summaries)?
        )
        .expect("write to string");
    }
    out.push_str("</metadata>\n");
    Ok(out)
}

/// Extracts `(label, csv)` pairs embedded in a chart.
pub fn embedded_series(svg: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut rest = svg;
    while let Some(start) = rest.find("<series label=\"") {
        rest = &rest[start + 15..];
        let Some(end_label) = rest.find('"') else { break };
        let label = rest[..end_label]
            .replace("&quot;", "\"")
            .replace("&gt;", ">")
            .replace("&lt;", "<")
            .replace("&amp;", "&");
        let Some(open) = rest.find("<![CDATA[\n") else { break };
        let Some(close) = rest.find("]]>") else { break };
        out.push((label, rest[open + 10..close].to_string()));
        rest = &rest[close + 3..];
    }
    out
}

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Panel {
    fn px(&self, t: f64, t_max: f64) -> f64 {
        if t_max <= 0.0 {
            self.x + self.w / 2.0
        } else {
            self.x + self.w * t / t_max
        }
    }

    fn py(&self, v: f64, lo: f64, hi: f64) -> f64 {
        let span = if hi > lo { hi - lo } else { 1.0 };
        self.y + self.h - self.h * (v - lo) / span
    }

    fn frame(&self, out: &mut String, title: &str, y_lo: f64, y_hi: f64, epochs: usize) {
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>",
            self.x, self.y, self.w, self.h
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
            self.x + self.w / 2.0,
            self.y - 8.0,
            xml_escape(title)
        );
        for (v, anchor_y) in [(y_lo, self.y + self.h), (y_hi, self.y)] {
            let _ = writeln!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>",
                self.x - 4.0,
                anchor_y + 3.0
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">epoch (0..{})</text>",
            self.x + self.w / 2.0,
            self.y + self.h + 16.0,
            epochs.saturating_sub(1)
        );
    }
}

fn placeholder(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"120\">\n\
         <text x=\"200\" y=\"60\" text-anchor=\"middle\" font-size=\"14\">{}: no data</text>\n\
         <metadata>\n</metadata>\n</svg>\n",
        xml_escape(title)
    )
}

fn polyline(
    out: &mut String,
    panel: &Panel,
    points: &[(f64, f64)],
    t_max: f64,
    lo: f64,
    hi: f64,
    color: &str,
    dashed: bool,
) {
    let coords: Vec<String> = points
        .iter()
        .map(|&(t, v)| format!("{:.2},{:.2}", panel.px(t, t_max), panel.py(v, lo, hi)))
        .collect();
    let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
        coords.join(" ")
    );
    for c in &coords {
        let (x, y) = c.split_once(',').expect("formatted pair");
        let _ = writeln!(out, "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{color}\"/>");
    }
}

/// Family entropy and cumulative best reward per epoch; baselines are dashed.
pub fn entropy_rmax_svg(series: &[PlotSeries]) -> Result<String> {
    if series.iter().all(|s| s.summaries.is_empty()) {
        return Ok(placeholder("family entropy / best reward"));
    }
    let epochs = series.iter().map(|s| s.summaries.len()).max().unwrap_or(0);
    let t_max = epochs.saturating_sub(1) as f64;
    let h_hi = series
        .iter()
        .flat_map(|s| s.summaries.iter().filter_map(|e| e.entropy_bits))
        .fold(1.0_f64, f64::max);
    let r_hi = series
        .iter()
        .flat_map(|s| s.summaries.iter().map(|e| e.r_max))
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    let left = Panel { x: 60.0, y: 40.0, w: 300.0, h: 220.0 };
    let right = Panel { x: 440.0, y: 40.0, w: 300.0, h: 220.0 };
    let mut out = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"780\" height=\"340\" font-family=\"sans-serif\">\n",
    );
    left.frame(&mut out, "family entropy H (bits)", 0.0, h_hi, epochs);
    right.frame(&mut out, "cumulative best reward", 0.0, r_hi, epochs);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let h: Vec<(f64, f64)> = s
            .summaries
            .iter()
            .map(|e| (e.epoch as f64, e.entropy_bits.unwrap_or(0.0)))
            .collect();
        let r: Vec<(f64, f64)> = s.summaries.iter().map(|e| (e.epoch as f64, e.r_max)).collect();
        polyline(&mut out, &left, &h, t_max, 0.0, h_hi, color, s.baseline);
        polyline(&mut out, &right, &r, t_max, 0.0, r_hi, color, s.baseline);
        let dash = if s.baseline { " stroke-dasharray=\"6 4\"" } else { "" };
        let y = 300.0 + 14.0 * (i / 3) as f64;
        let x = 60.0 + 240.0 * (i % 3) as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>\
             <text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>",
            x + 24.0,
            x + 30.0,
            y + 4.0,
            xml_escape(&s.label)
        );
    }
    out.push_str(&embedded_data(series)?);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Stacked per-epoch family composition of correct rollouts, one panel per
/// run.
pub fn family_bars_svg(series: &[PlotSeries]) -> Result<String> {
    if series.iter().all(|s| s.summaries.is_empty()) {
        return Ok(placeholder("family composition"));
    }
    let mut labels: Vec<String> = series
        .iter()
        .flat_map(|s| s.summaries.iter().flat_map(|e| e.families.keys().cloned()))
        .collect();
    labels.sort();
    labels.dedup();
    let panel_h = 160.0;
    let height = 60.0 + series.len() as f64 * (panel_h + 50.0) + 20.0 * labels.len().div_ceil(4) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"{height:.0}\" font-family=\"sans-serif\">\n"
    );
    for (i, s) in series.iter().enumerate() {
        let panel = Panel {
            x: 60.0,
            y: 40.0 + i as f64 * (panel_h + 50.0),
            w: 540.0,
            h: panel_h,
        };
        panel.frame(&mut out, &format!("{} family share", s.label), 0.0, 1.0, s.summaries.len());
        let n = s.summaries.len().max(1) as f64;
        let slot = panel.w / n;
        for e in &s.summaries {
            let total: usize = e.families.values().sum();
            if total == 0 {
                continue;
            }
            let mut acc = 0.0;
            for (li, label) in labels.iter().enumerate() {
                let c = e.families.get(label).copied().unwrap_or(0);
                if c == 0 {
                    continue;
                }
                let frac = c as f64 / total as f64;
                let y_top = panel.py(acc + frac, 0.0, 1.0);
                let y_bot = panel.py(acc, 0.0, 1.0);
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{} {}: {}</title></rect>",
                    panel.x + slot * e.epoch as f64 + slot * 0.1,
                    y_top,
                    slot * 0.8,
                    y_bot - y_top,
                    PALETTE[li % PALETTE.len()],
                    e.epoch,
                    xml_escape(label),
                    c
                );
                acc += frac;
            }
        }
    }
    let legend_y = 40.0 + series.len() as f64 * (panel_h + 50.0);
    for (li, label) in labels.iter().enumerate() {
        let x = 60.0 + 140.0 * (li % 4) as f64;
        let y = legend_y + 20.0 * (li / 4) as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>",
            y - 9.0,
            PALETTE[li % PALETTE.len()],
            x + 14.0,
            y,
            xml_escape(label)
        );
    }
    out.push_str(&embedded_data(series)?);
    out.push_str("</svg>\n");
    Ok(out)
}

pub const ENTROPY_CHART: &str = "entropy_rmax.svg";
pub const FAMILY_CHART: &str = "families.svg";

/// Writes both charts into `dir` and returns their paths.
pub fn emit_plots(series: &[PlotSeries], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let a = dir.join(ENTROPY_CHART);
    let b = dir.join(FAMILY_CHART);
    fs::File::create(&a)?.write_all(entropy_rmax_svg(series)?.as_bytes())?;
    fs::File::create(&b)?.write_all(family_bars_svg(series)?.as_bytes())?;
    Ok(vec![a, b])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(epoch: usize, reward: f64, p1: usize, p2: usize) -> RolloutRecord {
        RolloutRecord {
            epoch,
            group: 0,
            rollout: 0,
            adapter: 0,
            parent: 0,
            reward,
            num_tokens: p1 + p2,
            phase1_tokens: p1,
            phase2_tokens: p2,
            u_i: 0.0,
            u_mean: 0.0,
            u_std: 0.0,
            beta: None,
            gamma_eff: 0.0,
            shaped_advantage: 0.0,
            streaming_mi_stopped: false,
            streaming_mi_stop_step: None,
            gate_window_mi: None,
            family: (reward > 0.0).then(|| "f".to_string()),
            mean_mi: 0.0,
            candidate: String::new(),
            constant_group: false,
            new_best: false,
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(family_entropy(&["a", "a", "a"]), Some(0.0));
        assert_eq!(family_entropy(&["a", "b", "c", "d"]), Some(2.0));
        let h = family_entropy(&["a", "a", "a", "b"]).unwrap();
        assert!((h - 0.8112781244591328).abs() < 1e-12);
        assert_eq!(family_entropy::<&str>(&[]), None);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(spearman_rho(&[1.0], &[1.0]), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn length_diagnostic_examples() {
        let rows: Vec<RolloutRecord> = (1..20).map(|i| record(0, i as f64, 20 - i, i)).collect();
        let d = length_reward_diagnostic(&rows, None);
        assert_eq!(d.rho_code, Some(1.0));
        assert_eq!(d.rho_think, Some(-1.0));
        let wrong: Vec<RolloutRecord> = (0..5).map(|i| record(0, 0.0, i, i)).collect();
        let d = length_reward_diagnostic(&wrong, None);
        assert_eq!(d.correct_rollouts, 0);
        assert_eq!(d.rho_total, None);
    }

    #[test]
    fn summaries_track_running_best() {
        let log = RunLog {
            rollouts: vec![
                record(0, 1.0, 1, 1),
                record(0, 0.5, 1, 1),
                record(1, 0.0, 1, 1),
                record(2, 2.0, 1, 1),
                record(2, 3.0, 1, 1),
            ],
            ensemble: vec![],
        };
        let s = epoch_summaries(&log);
        let r: Vec<f64> = s.iter().map(|e| e.r_max).collect();
        assert_eq!(r, vec![1.0, 1.0, 3.0]);
        assert_eq!(s[1].entropy_bits, None);
        let events: usize = s.iter().map(|e| e.new_best_events).sum();
        assert_eq!(events, count_new_best_events(&log.rollouts));
        assert_eq!(events, 3);
    }

    #[test]
    fn chart_data_round_trips() {
        let log = RunLog {
            rollouts: vec![record(0, 1.0, 2, 2), record(1, 2.0, 1, 3)],
            ensemble: vec![],
        };
        let summaries = epoch_summaries(&log);
        let series = vec![
            PlotSeries {
                label: "method".into(),
                baseline: false,
                summaries: summaries.clone(),
            },
            PlotSeries {
                label: "baseline <K=1>".into(),
                baseline: true,
                summaries: summaries[..1].to_vec(),
            },
        ];
        let svg = entropy_rmax_svg(&series).unwrap();
        assert!(svg.contains("stroke-dasharray"));
        let data = embedded_series(&svg);
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].1, summaries_csv(&summaries).unwrap());
        assert_eq!(data[1].0, "baseline <K=1>");
        let bars = family_bars_svg(&series).unwrap();
        assert_eq!(embedded_series(&bars)[0].1, data[0].1);
        assert!(entropy_rmax_svg(&[]).unwrap().contains("no data"));
    }

    #[test]
    fn diagnose_table_shape() {
        let rows = vec![diagnose_row("empty", &RunLog::default())];
        let text = diagnose_text(&rows);
        assert!(text.contains("undefined"));
        let csv = diagnose_csv(&rows).unwrap();
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 7);
    }
}
