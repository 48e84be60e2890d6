use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentPlan, Method};
use super::run::{ExperimentResult, RESULT_VERSION};
use crate::error::{Error, Result};
use crate::oracle::RewardGrids;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to re-run an experiment and the files it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub package_version: String,
    pub result_version: u32,
    pub plan: ExperimentPlan,
    pub reward_grids: RewardGrids,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&body)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                expected: MANIFEST_VERSION,
                found: m.version,
            });
        }
        Ok(m)
    }
}

pub const RESULT_FILE: &str = "result.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const CSV_HEADER: &str = "method,env,scenario,seed,query_count,metric,value\n";

fn write(dir: &Path, name: &str, body: &str, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    files.push(name.to_string());
    Ok(())
}

/// Long-format reward accuracy rows, one per method, seed and query count.
pub fn reward_csv(r: &ExperimentResult) -> String {
    let mut s = String::from(CSV_HEADER);
    let (env, scen) = (r.plan.env, r.plan.scenario);
    for m in r.plan.methods() {
        for rec in r.reward.iter().filter(|x| x.method == m) {
            let _ = writeln!(s, "{m},{env},{scen},{},{},reward_accuracy,{}", rec.seed, rec.query_count, rec.accuracy);
        }
    }
    s
}

/// Long-format calibrated feature MSE rows.
pub fn feature_csv(r: &ExperimentResult) -> String {
    let mut s = String::from(CSV_HEADER);
    let (env, scen) = (r.plan.env, r.plan.scenario);
    for rec in &r.feature {
        let _ = writeln!(s, "cf:{},{env},{scen},{},{},feature_mse,{}", rec.feature, rec.seed, rec.query_count, rec.mse);
    }
    s
}

/// Long-format accuracy of the multi-task models on their own training rewards.
pub fn pretrain_csv(r: &ExperimentResult) -> String {
    let mut s = String::from(CSV_HEADER);
    let (env, scen) = (r.plan.env, r.plan.scenario);
    for rec in &r.pretrain {
        let name = if rec.heads == 1 { "single_pref".to_string() } else { format!("joint_pref_{}", rec.heads) };
        let _ = writeln!(s, "{name},{env},{scen},{},{},training_reward_accuracy,{}", rec.seed, rec.query_count, rec.accuracy);
    }
    s
}

pub fn evaluable_csv(r: &ExperimentResult) -> String {
    let mut s = String::from("env,scenario,seed,reward,w0,w1,w2,evaluable_pairs\n");
    for rec in &r.evaluable {
        let w = rec.weights.0;
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.plan.env, r.plan.scenario, rec.seed, rec.reward, w[0], w[1], w[2], rec.evaluable);
    }
    s
}

pub fn loss_csv(r: &ExperimentResult) -> String {
    let mut s = String::from("model,seed,epoch,loss\n");
    for c in &r.losses {
        for (e, l) in c.epoch_loss.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{l}", c.model, c.seed, e + 1);
        }
    }
    s
}

pub fn summary_csv(r: &ExperimentResult) -> String {
    let mut s = String::from("method,query_count,mean,se,n\n");
    for a in r.aggregate_rewards() {
        let _ = writeln!(s, "{},{},{},{},{}", a.method, a.query_count, a.mean, a.se, a.n);
    }
    for a in r.aggregate_features() {
        let _ = writeln!(s, "cf_mse:{},{},{},{},{}", a.feature, a.query_count, a.mean, a.se, a.n);
    }
    s
}

/// Writes results, manifest, CSV tables and SVG plots into `dir`. Output is
/// a pure function of `result`, so re-exporting gives identical bytes.
pub fn export(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    write(dir, RESULT_FILE, &serde_json::to_string_pretty(result)?, &mut files)?;
    write(dir, "rewards.csv", &reward_csv(result), &mut files)?;
    write(dir, "features.csv", &feature_csv(result), &mut files)?;
    write(dir, "pretrain.csv", &pretrain_csv(result), &mut files)?;
    write(dir, "evaluable.csv", &evaluable_csv(result), &mut files)?;
    write(dir, "losses.csv", &loss_csv(result), &mut files)?;
    write(dir, "summary.csv", &summary_csv(result), &mut files)?;
    for (name, body) in emit_plots(result) {
        write(dir, &name, &body, &mut files)?;
    }
    files.push(MANIFEST_FILE.to_string());
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        result_version: RESULT_VERSION,
        plan: result.plan.clone(),
        reward_grids: result.reward_grids.clone(),
        files: files.clone(),
    };
    let mut tmp = Vec::new();
    write(dir, MANIFEST_FILE, &serde_json::to_string_pretty(&manifest)?, &mut tmp)?;
    Ok(files.into_iter().map(|f| dir.join(f)).collect())
}

/// One line of a plot: `(x, mean, standard error)` points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

const PALETTE: [&str; 9] = ["#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f", "#3d3b30", "#e07a5f", "#81b29a"];

/// Line plot with a shaded band of one standard error around each line.
/// Points are placed evenly along x in the order given, labelled by value.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 200.0, 40.0, 60.0);
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let finite = |v: f64| v.is_finite();
    let lo = series.iter().flat_map(|s| s.points.iter().map(|p| p.1 - p.2)).filter(|v| finite(*v)).fold(f64::INFINITY, f64::min);
    let hi = series.iter().flat_map(|s| s.points.iter().map(|p| p.1 + p.2)).filter(|v| finite(*v)).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let px = |x: f64| {
        let i = xs.iter().position(|&v| v == x).unwrap_or(0) as f64;
        let n = (xs.len().max(2) - 1) as f64;
        left + i / n * (w - left - right)
    };
    let py = |y: f64| top + (hi - y) / (hi - lo) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (w - right + left) / 2.0, esc(title));
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for &x in &xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), y1 + 18.0);
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"##, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, h - 16.0, esc(x_label));
    let _ = writeln!(s, r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#, (y0 + y1) / 2.0, esc(y_label));
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<&(f64, f64, f64)> = ser.points.iter().filter(|p| finite(p.1)).collect();
        if pts.is_empty() {
            continue;
        }
        let mut band = String::new();
        for p in &pts {
            let _ = write!(band, "{:.1},{:.1} ", px(p.0), py(p.1 + p.2));
        }
        for p in pts.iter().rev() {
            let _ = write!(band, "{:.1},{:.1} ", px(p.0), py(p.1 - p.2));
        }
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#, band.trim_end());
        let line: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 18.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="14" height="4" fill="{color}"/><text x="{}" y="{}">{}</text>"#, x1 + 16.0, ly, x1 + 36.0, ly + 6.0, esc(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn esc(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reward accuracy versus query count per method and calibrated feature
/// MSE versus query count, as `(file name, svg)`.
pub fn emit_plots(r: &ExperimentResult) -> Vec<(String, String)> {
    let aggs = r.aggregate_rewards();
    let series: Vec<Series> = r
        .plan
        .methods()
        .into_iter()
        .map(|m: Method| Series {
            name: m.name(),
            points: aggs.iter().filter(|a| a.method == m).map(|a| (a.query_count as f64, a.mean, a.se)).collect(),
        })
        .collect();
    let title = format!("{} / {}: reward accuracy", r.plan.env, r.plan.scenario);
    let mut out = vec![("accuracy.svg".to_string(), line_plot(&title, "reward queries", "accuracy", &series))];
    let faggs = r.aggregate_features();
    if !faggs.is_empty() {
        let mut feats: Vec<_> = faggs.iter().map(|a| a.feature).collect();
        feats.dedup();
        let series: Vec<Series> = feats
            .into_iter()
            .map(|f| Series {
                name: f.to_string(),
                points: faggs.iter().filter(|a| a.feature == f).map(|a| (a.query_count as f64, a.mean, a.se)).collect(),
            })
            .collect();
        let title = format!("{}: calibrated feature error", r.plan.env);
        out.push(("feature_mse.svg".to_string(), line_plot(&title, "feature queries", "test MSE", &series)));
    }
    out
}

/// Plain-text summary: accuracy per method and query count, the low-data
/// comparison against the best baseline, and feature errors.
pub fn render_report(r: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} / {} ({} seeds)", r.plan.env, r.plan.scenario, r.plan.seeds.len());
    let grid = &r.plan.config.reward_query_grid;
    let _ = write!(s, "{:<24}", "method");
    for q in grid {
        let _ = write!(s, "{:>16}", format!("{q}q"));
    }
    s.push('\n');
    let aggs = r.aggregate_rewards();
    for m in r.plan.methods() {
        let _ = write!(s, "{:<24}", m.name());
        for a in aggs.iter().filter(|a| a.method == m) {
            let _ = write!(s, "{:>16}", format!("{:.3} ± {:.3}", a.mean, a.se));
        }
        s.push('\n');
    }
    for q in grid.iter().filter(|&&q| q > 0).take(2) {
        if let Some(row) = r.low_data_row(*q) {
            let _ = writeln!(
                s,
                "@{q}: cf {:.3} vs {} {:.3} ({:+.1} points)",
                row.calibrated,
                row.best_baseline,
                row.baseline,
                100.0 * (row.calibrated - row.baseline)
            );
        }
    }
    for a in r.aggregate_features() {
        let _ = writeln!(s, "mse {} ({}) @{}: {:.4} ± {:.4}", a.feature, a.function.name(), a.query_count, a.mean, a.se);
    }
    if !r.evaluable.is_empty() {
        let counts: Vec<f64> = r.evaluable.iter().map(|e| e.evaluable as f64).collect();
        let _ = writeln!(s, "evaluable pairs: mean {:.1}", counts.iter().sum::<f64>() / counts.len() as f64);
    }
    s
}
