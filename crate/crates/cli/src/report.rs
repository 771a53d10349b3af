//! Markdown tables rendered purely from stored JSON artifacts.

use std::fmt::Write as _;
use std::path::Path;

use desense_core::maskgen::masked_ratio;
use desense_core::netpbm;

use crate::artifacts::read_json;
use crate::commands::{EvalReport, MetricsReport};
use crate::error::{CliError, Result};
use crate::experiments::{
    FedTable, LevelTable, PrivacyTable, SearchedTable, SituationTable, SweepTable, FED_FILE,
    LEVEL_FILE, PRIVACY_FILE, PRIVACY_NATIVE_FILE, SEARCHED_FILE, SITUATION_FILE, SWEEP_FILE,
};

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

pub fn render_levels(t: &LevelTable) -> String {
    let mut s = format!(
        "## Accuracy by mask level\n\n{} seeds, {} test images x {} masks per level\n\n",
        t.seeds.len(),
        t.test_images,
        t.masks_per_image
    );
    s.push_str("| Level | Ratio | clean | mask-trained | delta |\n|---|---|---|---|---|\n");
    for r in &t.rows {
        let lo = if r.level == 1 {
            0.01
        } else {
            0.1 * f64::from(r.level - 1)
        };
        let _ = writeln!(
            s,
            "| {} | {:.2}-{:.1} | {} | {} | {:+.2} |",
            r.level,
            lo,
            0.1 * f64::from(r.level),
            pct(r.clean_mean),
            pct(r.masked_mean),
            100.0 * r.delta
        );
    }
    let _ = writeln!(
        s,
        "\nSpearman rho (level, clean accuracy): {:.3}",
        t.clean_spearman
    );
    s
}

pub fn render_searched(t: &SearchedTable) -> String {
    let mut s = String::from("## Searched mask\n\n");
    s.push_str(
        "| Seed | Ratio | clean | mask-trained | fixed-mask | fsm |\n|---|---|---|---|---|---|\n",
    );
    for r in &t.rows {
        let _ = writeln!(
            s,
            "| {} | {:.3} | {} | {} | {} | {} |",
            r.seed,
            r.mask_ratio,
            pct(r.clean),
            pct(r.masked),
            pct(r.fixed),
            pct(r.fsm)
        );
    }
    let _ = writeln!(
        s,
        "| mean | {:.3} | {} | {} | {} | {} |",
        t.mean_ratio,
        pct(t.mean_clean),
        pct(t.mean_masked),
        pct(t.mean_fixed),
        pct(t.mean_fsm)
    );
    s
}

pub fn render_situations(t: &SituationTable) -> String {
    let mut s = format!(
        "## Verification situations (fsm model)\n\n{} test pairs, {} calibration pairs\n\n",
        t.pairs, t.calibration_pairs
    );
    s.push_str("| Seed | Situation 1 | Situation 2 | Situation 3 |\n|---|---|---|---|\n");
    for r in &t.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.seed,
            pct(r.both_masked),
            pct(r.clean_query),
            pct(r.both_clean)
        );
    }
    let _ = writeln!(
        s,
        "| mean | {} | {} | {} |",
        pct(t.mean[0]),
        pct(t.mean[1]),
        pct(t.mean[2])
    );
    s
}

pub fn render_privacy(t: &PrivacyTable) -> String {
    let mut s = format!(
        "## Desensitization privacy ({0}x{0})\n\n{1} images, searched mask ratio {2:.3}\n\n",
        t.side, t.images, t.mask_ratio
    );
    s.push_str("| Method | k | dSSIM | PSNR (dB) |\n|---|---|---|---|\n");
    for r in &t.rows {
        let k = r.k.map_or("-".into(), |k| k.to_string());
        let p = r.psnr_db.map_or("inf".into(), |p| format!("{p:.2}"));
        let _ = writeln!(s, "| {} | {} | {:.4} | {} |", r.method, k, r.dssim, p);
    }
    s
}

pub fn render_sweep(t: &SweepTable) -> String {
    let mut s = format!(
        "## Threshold sweep (seed {}, MSM {})\n\n",
        t.seed, t.msm_file
    );
    s.push_str("| T | Template kept | Mask ratio | mask-trained | fsm | dSSIM |\n|---|---|---|---|---|---|\n");
    for r in &t.rows {
        let _ = writeln!(
            s,
            "| {:.1} | {:.3} | {:.3} | {} | {} | {:.4} |",
            r.threshold,
            r.template_kept,
            r.mask_ratio,
            r.masked_acc.map_or("-".into(), pct),
            pct(r.fsm_acc),
            r.dssim
        );
    }
    s
}

pub fn render_fed(t: &FedTable) -> String {
    let mut s = format!(
        "## Federated training\n\n{} clients, {} rounds x {} local iterations, momentum {:?}\n\n",
        t.clients, t.rounds, t.local_iters, t.momentum
    );
    s.push_str("| Round | mean client loss | global accuracy |\n|---|---|---|\n");
    for r in &t.history {
        let loss = r.client_losses.iter().sum::<f64>() / r.client_losses.len().max(1) as f64;
        let acc = r.global_acc.map_or("-".into(), pct);
        let _ = writeln!(s, "| {} | {:.4} | {} |", r.round, loss, acc);
    }
    let _ = writeln!(
        s,
        "\ncentralized {} vs federated {}",
        pct(t.centralized_acc),
        pct(t.federated_acc)
    );
    s
}

pub fn render_metrics(m: &MetricsReport) -> String {
    let mut s = format!("## Image metrics\n\n{} pairs\n\n", m.pairs.len());
    let p = m
        .corpus_mean
        .psnr_db
        .map_or("inf".into(), |p| format!("{p:.2}"));
    let _ = writeln!(
        s,
        "mean SSIM {:.4}, mean dSSIM {:.4}, mean PSNR {} dB",
        m.corpus_mean.ssim, m.corpus_mean.dssim, p
    );
    s
}

pub fn render_eval(e: &EvalReport) -> String {
    let mut s = String::from("## Evaluation\n\n");
    if let Some(a) = e.clean_accuracy {
        let _ = writeln!(s, "closed-set accuracy, clean: {}", pct(a));
    }
    if let Some(a) = e.masked_accuracy {
        let _ = writeln!(s, "closed-set accuracy, masked: {}", pct(a));
    }
    if let Some(v) = &e.situations {
        s.push_str("\n| Situation | threshold | accuracy |\n|---|---|---|\n");
        for r in &v.results {
            let _ = writeln!(
                s,
                "| {:?} | {:.4} | {} |",
                r.situation,
                r.threshold,
                pct(r.accuracy)
            );
        }
    }
    s
}

fn section<T: serde::de::DeserializeOwned>(
    dir: &Path,
    name: &str,
    render: fn(&T) -> String,
    out: &mut Vec<String>,
) -> Result<()> {
    let path = dir.join(name);
    if path.exists() {
        out.push(render(&read_json::<T>(&path)?));
    }
    Ok(())
}

/// Every known table found in `dir` (and its `sweep` subdirectory).
pub fn regenerate(dir: &Path) -> Result<String> {
    let mut parts = Vec::new();
    section(dir, LEVEL_FILE, render_levels, &mut parts)?;
    section(dir, SEARCHED_FILE, render_searched, &mut parts)?;
    section(dir, PRIVACY_FILE, render_privacy, &mut parts)?;
    section(dir, PRIVACY_NATIVE_FILE, render_privacy, &mut parts)?;
    section(dir, SITUATION_FILE, render_situations, &mut parts)?;
    section(dir, SWEEP_FILE, render_sweep, &mut parts)?;
    section(&dir.join("sweep"), SWEEP_FILE, render_sweep, &mut parts)?;
    section(dir, FED_FILE, render_fed, &mut parts)?;
    section(dir, "metrics.json", render_metrics, &mut parts)?;
    section(dir, "eval.json", render_eval, &mut parts)?;
    if parts.is_empty() {
        return Err(CliError::Data(format!(
            "no known report files in {}",
            dir.display()
        )));
    }
    Ok(parts.join("\n"))
}

/// Checks each sweep row against its stored mask file and search report.
pub fn check_sweep(dir: &Path) -> Result<SweepTable> {
    let table: SweepTable = read_json(&dir.join(SWEEP_FILE))?;
    for r in &table.rows {
        let mask = netpbm::load_mask(dir.join(&r.mask_file))?;
        if masked_ratio(&mask) != r.mask_ratio {
            return Err(CliError::Data(format!(
                "{}: stored ratio {} differs",
                r.mask_file, r.mask_ratio
            )));
        }
        let search: desense_core::search::SearchReport = read_json(&dir.join(&r.search_file))?;
        if search.chosen_record().masked_ratio != r.mask_ratio
            || search.template.threshold != r.threshold
        {
            return Err(CliError::Data(format!(
                "{} disagrees with its row",
                r.search_file
            )));
        }
    }
    Ok(table)
}
