//! Ablation grids: head modes (single vs dual) and aspect counts, each
//! trained per seed and scored on the seen and unseen test splits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, HeadMode, TrainConfig, TrainError};
use crate::corpus::split::SplitKind;
use crate::eval::{evaluate_split, EvalConfig, Head, HeadChoice};
use crate::eval::metrics::spearman;
use crate::kb::KnowledgeBase;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGrid {
    /// Single-contrastive, single-supervised, and dual-head training.
    Heads,
    /// Dual-head training at increasing query-set sizes.
    Aspects(Vec<usize>),
}

/// One scored table row: a variant evaluated with one head for one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub head: Head,
    /// Query positions used (aspect-count grid), if varied.
    pub aspect_count: Option<usize>,
    pub seen_auc: f64,
    pub seen_f1: f64,
    pub unseen_auc: f64,
    pub unseen_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Per-variant seed-averaged (seen AUC, unseen AUC).
    pub summary: Vec<(String, f64, f64)>,
    /// Human-readable directional findings (heads grid only).
    pub findings: Vec<String>,
    /// Spearman rank correlation of unseen AUC with aspect count
    /// (aspect grid only).
    pub aspect_spearman: Option<f64>,
}

fn score(
    cfg: &TrainConfig,
    corpus_dir: &Path,
    kb: &KnowledgeBase,
    run_dir: &Path,
    head: Head,
) -> Result<(f64, f64, f64, f64), TrainError> {
    let (model, _) = super::load_model(&run_dir.join("best.ckpt"))?;
    let _ = cfg;
    let eval_cfg = EvalConfig {
        head: match head {
            Head::Contrastive => HeadChoice::Contrastive,
            Head::Supervised => HeadChoice::Supervised,
        },
        ..EvalConfig::default()
    };
    let seen = evaluate_split(&model, kb, corpus_dir, SplitKind::TestSeen, &eval_cfg)?;
    let unseen = evaluate_split(&model, kb, corpus_dir, SplitKind::TestUnseen, &eval_cfg)?;
    Ok((seen[0].macro_auc, seen[0].macro_f1, unseen[0].macro_auc, unseen[0].macro_f1))
}

fn variant_config(base: &TrainConfig, seed: u64, mode: HeadMode, aspects: usize) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.head_mode = mode;
    cfg.aspect_count = aspects;
    cfg
}

/// Train and score every grid variant for every seed. Artifacts land under
/// `out_dir/<variant>-s<seed>/`.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    seeds: &[u64],
    corpus_dir: &Path,
    kb: &KnowledgeBase,
    out_dir: &Path,
) -> Result<AblationReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();

    match grid {
        AblationGrid::Heads => {
            for &seed in seeds {
                for (mode, label) in [
                    (HeadMode::ContrastiveOnly, "single-con"),
                    (HeadMode::SupervisedOnly, "single-sup"),
                    (HeadMode::Dual, "dual"),
                ] {
                    let cfg = variant_config(base, seed, mode, base.aspect_count);
                    let run_dir = out_dir.join(format!("{label}-s{seed}"));
                    train(&cfg, corpus_dir, kb, &run_dir)?;
                    let evals: Vec<(Head, &str)> = match mode {
                        HeadMode::ContrastiveOnly => vec![(Head::Contrastive, "single-con")],
                        HeadMode::SupervisedOnly => vec![(Head::Supervised, "single-sup")],
                        HeadMode::Dual => {
                            vec![(Head::Contrastive, "dual-con"), (Head::Supervised, "dual-sup")]
                        }
                    };
                    for (head, variant) in evals {
                        let (seen_auc, seen_f1, unseen_auc, unseen_f1) =
                            score(&cfg, corpus_dir, kb, &run_dir, head)?;
                        rows.push(AblationRow {
                            variant: variant.to_string(),
                            seed,
                            head,
                            aspect_count: None,
                            seen_auc,
                            seen_f1,
                            unseen_auc,
                            unseen_f1,
                        });
                    }
                }
            }
        }
        AblationGrid::Aspects(counts) => {
            for &seed in seeds {
                for &count in counts {
                    let cfg = variant_config(base, seed, HeadMode::Dual, count);
                    let label = format!("aspects{count}");
                    let run_dir = out_dir.join(format!("{label}-s{seed}"));
                    train(&cfg, corpus_dir, kb, &run_dir)?;
                    let (seen_auc, seen_f1, unseen_auc, unseen_f1) =
                        score(&cfg, corpus_dir, kb, &run_dir, Head::Contrastive)?;
                    rows.push(AblationRow {
                        variant: label,
                        seed,
                        head: Head::Contrastive,
                        aspect_count: Some(count),
                        seen_auc,
                        seen_f1,
                        unseen_auc,
                        unseen_f1,
                    });
                }
            }
        }
    }

    let summary = summarize(&rows);
    let findings = match grid {
        AblationGrid::Heads => head_findings(&summary),
        AblationGrid::Aspects(_) => Vec::new(),
    };
    let aspect_spearman = match grid {
        AblationGrid::Aspects(counts) => Some(aspect_count_spearman(&rows, counts)),
        AblationGrid::Heads => None,
    };

    let report = AblationReport { rows, summary, findings, aspect_spearman };
    write_artifacts(out_dir, &report, grid)?;
    Ok(report)
}

fn summarize(rows: &[AblationRow]) -> Vec<(String, f64, f64)> {
    let mut variants: Vec<String> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    variants
        .into_iter()
        .map(|v| {
            let picked: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let n = picked.len() as f64;
            let seen = picked.iter().map(|r| r.seen_auc).sum::<f64>() / n;
            let unseen = picked.iter().map(|r| r.unseen_auc).sum::<f64>() / n;
            (v, seen, unseen)
        })
        .collect()
}

fn lookup(summary: &[(String, f64, f64)], variant: &str) -> Option<(f64, f64)> {
    summary.iter().find(|(v, _, _)| v == variant).map(|&(_, s, u)| (s, u))
}

/// Directional claims of the dual-head comparison, each rendered as a
/// pass/fail line.
fn head_findings(summary: &[(String, f64, f64)]) -> Vec<String> {
    let mut out = Vec::new();
    let (Some(single_con), Some(single_sup), Some(dual_con), Some(dual_sup)) = (
        lookup(summary, "single-con"),
        lookup(summary, "single-sup"),
        lookup(summary, "dual-con"),
        lookup(summary, "dual-sup"),
    ) else {
        return vec!["incomplete grid; no directional findings".to_string()];
    };
    let mut claim = |name: &str, ok: bool, detail: String| {
        out.push(format!("[{}] {name}: {detail}", if ok { "pass" } else { "fail" }));
    };
    claim(
        "dual-sup keeps seen accuracy",
        dual_sup.0 >= single_sup.0 - 0.01,
        format!("dual-sup seen AUC {:.4} vs single-sup {:.4}", dual_sup.0, single_sup.0),
    );
    claim(
        "dual-con keeps unseen accuracy",
        dual_con.1 >= single_con.1 - 0.01,
        format!("dual-con unseen AUC {:.4} vs single-con {:.4}", dual_con.1, single_con.1),
    );
    claim(
        "contrastive head beats supervised-only on unseen",
        dual_con.1 > single_sup.1,
        format!("dual-con unseen AUC {:.4} vs single-sup {:.4}", dual_con.1, single_sup.1),
    );
    out
}

/// Seed-mean unseen AUC per count, rank-correlated with the count.
fn aspect_count_spearman(rows: &[AblationRow], counts: &[usize]) -> f64 {
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let ys: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let picked: Vec<&AblationRow> =
                rows.iter().filter(|r| r.aspect_count == Some(c)).collect();
            picked.iter().map(|r| r.unseen_auc).sum::<f64>() / picked.len().max(1) as f64
        })
        .collect();
    spearman(&xs, &ys)
}

fn write_artifacts(
    out_dir: &Path,
    report: &AblationReport,
    grid: &AblationGrid,
) -> Result<(), TrainError> {
    // raw rows as delimited text
    let mut tsv = String::from("variant\tseed\thead\taspects\tseen_auc\tseen_f1\tunseen_auc\tunseen_f1\n");
    for r in &report.rows {
        tsv.push_str(&format!(
            "{}\t{}\t{:?}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.variant,
            r.seed,
            r.head,
            r.aspect_count.map(|c| c.to_string()).unwrap_or("-".into()),
            r.seen_auc,
            r.seen_f1,
            r.unseen_auc,
            r.unseen_f1
        ));
    }
    std::fs::write(out_dir.join("table.tsv"), &tsv)?;

    let mut txt = String::from("variant        seen-auc  unseen-auc\n");
    for (v, s, u) in &report.summary {
        txt.push_str(&format!("{v:<14} {s:<9.4} {u:.4}\n"));
    }
    for f in &report.findings {
        txt.push('\n');
        txt.push_str(f);
    }
    if let Some(rho) = report.aspect_spearman {
        txt.push_str(&format!("\nspearman(unseen AUC, aspect count) = {rho:.4}\n"));
    }
    std::fs::write(out_dir.join("table.txt"), &txt)?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(report).map_err(|e| TrainError::Config(e.to_string()))?,
    )?;

    if let AblationGrid::Aspects(counts) = grid {
        let points: Vec<(f64, f64)> = counts
            .iter()
            .map(|&c| {
                let label = format!("aspects{c}");
                let (_, _, unseen) = report
                    .summary
                    .iter()
                    .find(|(v, _, _)| *v == label)
                    .cloned()
                    .unwrap_or((label, 0.0, 0.0));
                (c as f64, unseen)
            })
            .collect();
        let mut data = String::from("aspect_count\tunseen_auc\n");
        for (x, y) in &points {
            data.push_str(&format!("{x}\t{y:.6}\n"));
        }
        std::fs::write(out_dir.join("auc_vs_aspects.tsv"), data)?;
        std::fs::write(out_dir.join("auc_vs_aspects.svg"), line_plot_svg(&points))?;
    }
    Ok(())
}

/// Minimal self-contained SVG line plot (regenerable from the .tsv).
pub fn line_plot_svg(points: &[(f64, f64)]) -> String {
    let (w, h, margin) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (x0, x1) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (mut y0, mut y1) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    if (y1 - y0).abs() < 1e-9 {
        y0 -= 0.05;
        y1 += 0.05;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0).max(1e-9) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);
    let path: Vec<String> =
        points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
    let dots: String = points
        .iter()
        .map(|&(x, y)| {
            format!(r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"##, sx(x), sy(y))
        })
        .collect();
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>
{dots}
<line x1="{margin}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle" font-size="13">query positions</text>
<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle" font-size="13">unseen macro AUC</text>
<text x="{margin}" y="{}" font-size="11">{y0:.3}</text>
<text x="{margin}" y="{}" font-size="11">{y1:.3}</text>
</svg>
"##,
        path.join(" "),
        h - margin,
        w - margin,
        h - margin,
        h - margin,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0,
        h - margin + 14.0,
        margin - 6.0,
    )
}
