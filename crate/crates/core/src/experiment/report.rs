//! SVG timelines and summary tables from evaluation outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{create_dir, write_json};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{read_frame_csv, FrameRow, MetricReport};
use crate::model::{ModelConfig, Variant};

/// `run.json` next to every evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub variant: Variant,
    pub encoder: String,
    pub split: String,
    pub checkpoint: Option<PathBuf>,
    pub passthrough: bool,
}

impl RunInfo {
    pub fn encoder_name(cfg: &ModelConfig) -> String {
        format!("Channel{}_Block{}", cfg.base_channels, cfg.blocks_per_layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub encoder: String,
    pub variant: String,
    pub pimae_deg: f64,
    pub acc: f64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rows: Vec<SummaryRow>,
    pub plots: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path).at(path)?)?)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const WIDTH: f64 = 960.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 20.0;
const STRIPE_H: f64 = 14.0;
const AZ_H: f64 = 220.0;

/// Runs of consecutive frames.
fn runs(frames: &BTreeSet<usize>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &f in frames {
        match out.last_mut() {
            Some(r) if r.1 + 1 == f => r.1 = f,
            _ => out.push((f, f)),
        }
    }
    out
}

/// Timeline of one utterance: reference and predicted activity stripes
/// per track on top, azimuth tracks over time below.
pub fn render_timeline_svg(rows: &[FrameRow], id: &str) -> String {
    let rows: Vec<&FrameRow> = rows.iter().filter(|r| r.id == id).collect();
    let n_frames = rows.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    let hop = rows.iter().find(|r| r.frame > 0).map_or(0.1, |r| r.t / r.frame as f64);
    let mut tracks: BTreeMap<(&str, usize), BTreeSet<usize>> = BTreeMap::new();
    for r in &rows {
        tracks.entry((r.kind.as_str(), r.track)).or_default().insert(r.frame);
    }
    let refs: Vec<_> = tracks.iter().filter(|(k, _)| k.0 == "ref").collect();
    let preds: Vec<_> = tracks.iter().filter(|(k, _)| k.0 == "pred").collect();
    let stripes = refs.len() + preds.len();
    let top = 40.0;
    let az_top = top + stripes as f64 * (STRIPE_H + 6.0) + 40.0;
    let height = az_top + AZ_H + 50.0;
    let plot_w = WIDTH - LEFT - RIGHT;
    let x_of = |f: f64| LEFT + plot_w * f / n_frames.max(1) as f64;
    let y_of = |az: f64| az_top + AZ_H * (1.0 - az / 180.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"##
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let _ = writeln!(s, r##"<text x="{LEFT}" y="20" font-size="13">{}</text>"##, esc(id));
    if n_frames == 0 {
        let _ = writeln!(s, r##"<text x="{LEFT}" y="{}">no frames</text>"##, top + 20.0);
        s.push_str("</svg>\n");
        return s;
    }
    for (i, ((kind, track), frames)) in refs.iter().chain(&preds).enumerate() {
        let y = top + i as f64 * (STRIPE_H + 6.0);
        let (class, fill, label) = if *kind == "ref" {
            ("ref-stripe", "#333333", format!("ref {track}"))
        } else {
            ("pred-stripe", "#d62728", format!("pred {track}"))
        };
        let _ = writeln!(s, r##"<g class="{class}" data-track="{track}">"##);
        let _ = writeln!(s, r##"<text x="{}" y="{}" text-anchor="end">{label}</text>"##, LEFT - 6.0, y + STRIPE_H - 3.0);
        for (a, b) in runs(frames) {
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{STRIPE_H}" fill="{fill}"/>"##,
                x_of(a as f64),
                x_of((b + 1) as f64) - x_of(a as f64)
            );
        }
        s.push_str("</g>\n");
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{az_top}" width="{plot_w}" height="{AZ_H}" fill="none" stroke="#999999"/>"##
    );
    for deg in [0.0, 45.0, 90.0, 135.0, 180.0] {
        let y = y_of(deg);
        let _ = writeln!(s, r##"<text x="{}" y="{:.2}" text-anchor="end">{deg}°</text>"##, LEFT - 6.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#eeeeee"/>"##, LEFT + plot_w);
    }
    for (kind, fill, r) in [("ref", "#333333", 2.5), ("pred", "#d62728", 1.8)] {
        let _ = writeln!(s, r##"<g class="{kind}-azimuth">"##);
        for row in rows.iter().filter(|row| row.kind == kind) {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}"/>"##,
                x_of(row.frame as f64 + 0.5),
                y_of(row.azimuth_deg)
            );
        }
        s.push_str("</g>\n");
    }
    let seconds = n_frames as f64 * hop;
    let _ = writeln!(s, r##"<text x="{LEFT}" y="{:.2}">0 s</text>"##, az_top + AZ_H + 18.0);
    let _ = writeln!(s, r##"<text x="{}" y="{:.2}" text-anchor="end">{seconds:.1} s</text>"##, LEFT + plot_w, az_top + AZ_H + 18.0);
    let _ = writeln!(s, r##"<text x="{LEFT}" y="{:.2}">azimuth over time (black: reference, red: prediction)</text>"##, az_top + AZ_H + 36.0);
    s.push_str("</svg>\n");
    s
}

/// Summary table over evaluation directories plus one timeline per run
/// (`sample` selects the utterance; the first one otherwise).
pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path, sample: Option<&str>) -> Result<ReportSummary> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation directories given".into()));
    }
    let mut loaded = Vec::new();
    for dir in inputs {
        let info: RunInfo = read_json(&dir.join("run.json"))?;
        let metrics: MetricReport = read_json(&dir.join("metrics.json"))?;
        let rows = read_frame_csv(&dir.join("frames.csv"))?;
        loaded.push((dir, info, metrics, rows));
    }
    create_dir(out_dir)?;
    let mut summary = ReportSummary { rows: Vec::new(), plots: Vec::new(), warnings: Vec::new() };
    for (i, (dir, info, metrics, rows)) in loaded.iter().enumerate() {
        let run = dir.file_name().map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned());
        let id = sample.map(str::to_owned).or_else(|| rows.first().map(|r| r.id.clone())).unwrap_or_default();
        if rows.is_empty() {
            let w = format!("{}: frames.csv is empty; the timeline is blank", dir.display());
            log::warn!("{w}");
            summary.warnings.push(w);
        } else if !rows.iter().any(|r| r.id == id) {
            let w = format!("{}: utterance {id} not found; the timeline is blank", dir.display());
            log::warn!("{w}");
            summary.warnings.push(w);
        }
        let path = out_dir.join(format!("{i:02}_{run}_timeline.svg"));
        std::fs::write(&path, render_timeline_svg(rows, &id)).at(&path)?;
        summary.plots.push(path);
        summary.rows.push(SummaryRow {
            run,
            encoder: info.encoder.clone(),
            variant: info.variant.name().to_string(),
            pimae_deg: metrics.pimae_deg,
            acc: metrics.acc,
            n_frames: metrics.n_frames,
        });
    }
    let mut md = String::from("| Encoder | Model | PIMAE (°) | ACC |\n|---|---|---|---|\n");
    for r in &summary.rows {
        let _ = writeln!(md, "| {} | {} | {:.2} | {:.2} |", r.encoder, r.variant, r.pimae_deg, r.acc);
    }
    let md_path = out_dir.join("summary.md");
    std::fs::write(&md_path, md).at(&md_path)?;
    let csv_path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &summary.rows {
        w.serialize(r)?;
    }
    w.flush().at(&csv_path)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{frame_rows, write_frame_csv, FramePrediction, Peak};

    fn three_speaker_rows() -> Vec<FrameRow> {
        let frames: Vec<FramePrediction> = (0..20)
            .map(|t| {
                let refs: Vec<Peak> = [30.0, 90.0, 150.0]
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| (t + s) % 3 != 0)
                    .map(|(slot, &azimuth_deg)| Peak { slot, azimuth_deg })
                    .collect();
                let preds = refs.iter().map(|p| Peak { azimuth_deg: p.azimuth_deg + 4.0, ..*p }).collect();
                FramePrediction { refs, preds }
            })
            .collect();
        frame_rows("utt-1", 0.1, &frames)
    }

    #[test]
    fn three_reference_stripes() {
        let svg = render_timeline_svg(&three_speaker_rows(), "utt-1");
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let count = |class: &str| doc.descendants().filter(|n| n.attribute("class") == Some(class)).count();
        assert_eq!(count("ref-stripe"), 3);
        assert!(count("pred-stripe") >= 1);
    }

    #[test]
    fn empty_rows_give_valid_blank_plot() {
        let svg = render_timeline_svg(&[], "none");
        roxmltree::Document::parse(&svg).unwrap();
        assert!(svg.contains("no frames"));
    }

    fn fake_run(dir: &Path, encoder: &str, variant: Variant, rows: &[FrameRow]) {
        create_dir(dir).unwrap();
        let info = RunInfo { variant, encoder: encoder.into(), split: "test".into(), checkpoint: None, passthrough: false };
        write_json(&dir.join("run.json"), &info).unwrap();
        write_json(&dir.join("metrics.json"), &MetricReport { pimae_deg: 4.0, acc: 1.0, n_frames: 20, n_assignments: 40 }).unwrap();
        write_frame_csv(&dir.join("frames.csv"), rows).unwrap();
    }

    #[test]
    fn summary_has_one_row_per_run() {
        let dir = tempfile::tempdir().unwrap();
        let rows = three_speaker_rows();
        let mut inputs = Vec::new();
        for enc in ["Channel16_Block1", "Channel32_Block1"] {
            for v in [Variant::Adoa, Variant::Mdoa] {
                let d = dir.path().join(format!("{enc}-{}", v.name()));
                fake_run(&d, enc, v, &rows);
                inputs.push(d);
            }
        }
        let out = dir.path().join("report");
        let s = cmd_report(&inputs, &out, None).unwrap();
        assert_eq!(s.rows.len(), 4);
        let md = std::fs::read_to_string(out.join("summary.md")).unwrap();
        assert_eq!(md.lines().count(), 6);
        for p in &s.plots {
            roxmltree::Document::parse(&std::fs::read_to_string(p).unwrap()).unwrap();
        }
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn empty_csv_warns() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("run");
        fake_run(&d, "Channel16_Block1", Variant::Mdoa, &[]);
        let s = cmd_report(&[d], &dir.path().join("out"), None).unwrap();
        assert_eq!(s.warnings.len(), 1);
    }
}
