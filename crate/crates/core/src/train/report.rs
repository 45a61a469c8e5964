//! Evaluation reports, CMC plots and ranking strips.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use super::trainer::embed_samples;
use crate::error::{DropError, Result};
use crate::model::DropModel;
use crate::retrieval::{evaluate_weighted, Mode, ModeWeights, RankingResult, RetrievalRecord};
use crate::synthetic::{part_names, Dataset, Sample, Split};

/// CMC points kept per row.
pub const CMC_POINTS: usize = 20;
const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub valid_queries: usize,
    pub skipped_queries: usize,
    pub cmc: Vec<f64>,
}

impl ModeRow {
    fn from_result(mode: Mode, r: &RankingResult) -> Self {
        Self {
            mode,
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
            map: r.map,
            valid_queries: r.valid_queries,
            skipped_queries: r.skipped_queries,
            cmc: r.cmc.iter().take(CMC_POINTS).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: usize,
    pub rows: Vec<ModeRow>,
    /// Pixel accuracy over query and gallery images.
    pub parsing_accuracy: f64,
    pub part_names: Vec<String>,
    /// Fraction of images predicting each part visible.
    pub query_visibility: Vec<f64>,
    pub gallery_visibility: Vec<f64>,
}

impl EvalReport {
    pub fn row(&self, mode: Mode) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epoch {}", self.epoch);
        let _ = writeln!(s, "{:<8}{:>8}{:>8}{:>8}{:>8}", "mode", "R-1", "R-5", "R-10", "mAP");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8}{:>8.1}{:>8.1}{:>8.1}{:>8.1}",
                r.mode.to_string(),
                100.0 * r.rank1,
                100.0 * r.rank5,
                100.0 * r.rank10,
                100.0 * r.map
            );
        }
        let skipped: usize = self.rows.iter().map(|r| r.skipped_queries).max().unwrap_or(0);
        if skipped > 0 {
            let _ = writeln!(s, "queries without a valid match: {skipped}");
        }
        let _ = writeln!(s, "parsing pixel accuracy {:.1}%", 100.0 * self.parsing_accuracy);
        let _ = writeln!(s, "{:<12}{:>8}{:>8}", "visible", "query", "gallery");
        for (i, name) in self.part_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<12}{:>7.1}%{:>7.1}%",
                name,
                100.0 * self.query_visibility[i],
                100.0 * self.gallery_visibility[i]
            );
        }
        s
    }
}

fn visibility_rates(records: &[RetrievalRecord], k: usize) -> Vec<f64> {
    let n = records.len().max(1) as f64;
    (0..k)
        .map(|p| records.iter().filter(|r| r.emb.visibility[p]).count() as f64 / n)
        .collect()
}

/// Ranking results for each requested mode.
pub fn rank_records(
    queries: &[RetrievalRecord],
    gallery: &[RetrievalRecord],
    modes: &[Mode],
    weights: &ModeWeights,
) -> Result<Vec<(Mode, RankingResult)>> {
    modes
        .iter()
        .map(|&m| Ok((m, evaluate_weighted(queries, gallery, m, weights)?)))
        .collect()
}

pub struct Evaluation {
    pub report: EvalReport,
    pub queries: Vec<RetrievalRecord>,
    pub gallery: Vec<RetrievalRecord>,
    pub rankings: Vec<(Mode, RankingResult)>,
}

pub fn run_evaluation(model: &DropModel, dataset: &Dataset, cfg: &EvalConfig, epoch: usize) -> Result<Evaluation> {
    let q = dataset.split(Split::Query);
    let g = dataset.split(Split::Gallery);
    if q.is_empty() {
        return Err(DropError::NoQueries);
    }
    let (queries, q_acc) = embed_samples(model, &q, EMBED_BATCH)?;
    let (gallery, g_acc) = embed_samples(model, &g, EMBED_BATCH)?;
    let rankings = rank_records(&queries, &gallery, &cfg.modes, &cfg.weights)?;
    let k = model.num_parts();
    let report = EvalReport {
        epoch,
        rows: rankings.iter().map(|(m, r)| ModeRow::from_result(*m, r)).collect(),
        parsing_accuracy: (q_acc * q.len() as f64 + g_acc * g.len() as f64) / (q.len() + g.len()) as f64,
        part_names: part_names(k).into_iter().map(String::from).collect(),
        query_visibility: visibility_rates(&queries, k),
        gallery_visibility: visibility_rates(&gallery, k),
    };
    Ok(Evaluation {
        report,
        queries,
        gallery,
        rankings,
    })
}

pub fn evaluate_model(model: &DropModel, dataset: &Dataset, cfg: &EvalConfig, epoch: usize) -> Result<EvalReport> {
    Ok(run_evaluation(model, dataset, cfg, epoch)?.report)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Line plot of CMC curves, one per row.
pub fn cmc_svg(rows: &[ModeRow], title: &str) -> String {
    let (w, h) = (520.0, 340.0);
    let (left, right, top, bottom) = (56.0, 110.0, 30.0, 44.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = rows.iter().map(|r| r.cmc.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - v);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" font-size="13">{}</text>"#, left, xml_escape(title));
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2:.1}" y="{3:.1}" text-anchor="end">{4}</text>"##,
            y(v),
            left + pw,
            left - 6.0,
            y(v) + 4.0,
            (v * 100.0) as i32
        );
    }
    for i in (0..n).step_by(if n > 10 { 5 } else { 1 }) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(i),
            top + ph + 16.0,
            i + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">rank</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">matching rate (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (j, row) in rows.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let pts: Vec<String> = row
            .cmc
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 16.0 * j as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            row.mode
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const BORDER: u32 = 3;
const VIS_ROW: u32 = 8;
const GAP: u32 = 6;

/// Query followed by its top gallery matches. Borders: blue query, green
/// correct, red wrong; the bar under each tile marks predicted-visible parts.
pub fn ranking_strip(
    query: &Sample,
    query_vis: &[bool],
    matches: &[(&Sample, &[bool])],
) -> RgbImage {
    let (tw, th) = (query.width as u32 + 2 * BORDER, query.height as u32 + 2 * BORDER + VIS_ROW + 2);
    let tiles = 1 + matches.len() as u32;
    let mut img = RgbImage::from_pixel(tiles * tw + (tiles - 1) * GAP + GAP, th, Rgb([255, 255, 255]));
    let mut draw = |slot: u32, s: &Sample, vis: &[bool], border: Rgb<u8>| {
        let x0 = slot * (tw + GAP) + if slot > 0 { GAP } else { 0 };
        for y in 0..query.height as u32 + 2 * BORDER {
            for x in 0..tw {
                img.put_pixel(x0 + x, y, border);
            }
        }
        let rgb = s.to_rgb_image();
        for (x, y, p) in rgb.enumerate_pixels() {
            img.put_pixel(x0 + BORDER + x, BORDER + y, *p);
        }
        let k = vis.len().max(1) as u32;
        let cell = (tw / k).max(1);
        let y0 = query.height as u32 + 2 * BORDER + 2;
        for (i, v) in vis.iter().enumerate() {
            let c = if *v { Rgb([40, 40, 40]) } else { Rgb([220, 220, 220]) };
            for y in y0..y0 + VIS_ROW {
                for x in 0..cell.saturating_sub(1) {
                    let px = x0 + i as u32 * cell + x;
                    if px < x0 + tw {
                        img.put_pixel(px, y, c);
                    }
                }
            }
        }
    };
    draw(0, query, query_vis, Rgb([30, 90, 220]));
    for (j, (s, vis)) in matches.iter().enumerate() {
        let color = if s.identity == query.identity {
            Rgb([30, 170, 60])
        } else {
            Rgb([210, 40, 40])
        };
        draw(j as u32 + 1, s, vis, color);
    }
    img
}

/// Strips for the first `n` queries of `ranking`.
pub fn ranking_strips(
    dataset: &Dataset,
    eval: &Evaluation,
    mode: Mode,
    n: usize,
    top_k: usize,
) -> Result<Vec<RgbImage>> {
    let (_, ranking) = eval
        .rankings
        .iter()
        .find(|(m, _)| *m == mode)
        .ok_or_else(|| DropError::Config(format!("mode {mode} was not evaluated")))?;
    let q = dataset.split(Split::Query);
    let g = dataset.split(Split::Gallery);
    let step = (q.len() / n.max(1)).max(1);
    let mut out = Vec::new();
    for qi in (0..q.len()).step_by(step).take(n) {
        let matches: Vec<(&Sample, &[bool])> = ranking.rankings[qi]
            .iter()
            .take(top_k)
            .map(|&gi| (g[gi], eval.gallery[gi].emb.visibility.as_slice()))
            .collect();
        out.push(ranking_strip(q[qi], &eval.queries[qi].emb.visibility, &matches));
    }
    Ok(out)
}
