//! Plain-text rendering of reports.

use std::fmt::Write;

use gpdmm_core::MetricsReport;

use crate::experiment::{Leaderboard, MccvReport, Stat};

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.4}"),
        Some(x) => format!("{x}"),
        None => "n/a".into(),
    }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let _ = writeln!(out, "{}", "-".repeat(total));
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn metrics_table(report: &MetricsReport) -> String {
    let mut rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .map(|c| {
            vec![
                c.label.clone(),
                format!("{}/{}", c.n_correct, c.n_test),
                format!("{:.4}", c.f1),
                opt(c.frechet),
                opt(c.dampening),
                opt(c.ldj_ratio),
            ]
        })
        .collect();
    let correct: usize = report.per_class.iter().map(|c| c.n_correct).sum();
    let total: usize = report.per_class.iter().map(|c| c.n_test).sum();
    rows.push(vec![
        "overall".into(),
        format!("{correct}/{total}"),
        format!("{:.4}", report.f1_macro),
        opt(report.frechet_avg),
        opt(report.dampening_ratio),
        opt(report.ldj_ratio),
    ]);
    let mut out = table(&["class", "correct", "F1", "D_avg", "dampening", "LDJ ratio"], &rows);
    if report.excluded_classes > 0 {
        let _ = writeln!(out, "{} class(es) without correct classifications excluded from D_avg", report.excluded_classes);
    }
    out
}

fn stat(s: &Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4} (n={})", s.mean, s.sd, s.n),
        None => "n/a".into(),
    }
}

pub fn mccv_table(report: &MccvReport) -> String {
    let rows: Vec<Vec<String>> = report
        .iterations
        .iter()
        .map(|it| {
            vec![
                it.iteration.to_string(),
                it.split_seed.to_string(),
                it.best_round.map_or("-".into(), |r| r.to_string()),
                opt(it.validation.as_ref().map(|v| v.f1_macro)),
                opt(it.validation.as_ref().and_then(|v| v.frechet_avg)),
                format!("{:.4}", it.test.f1_macro),
                opt(it.test.frechet_avg),
                opt(it.test.dampening_ratio),
                opt(it.test.ldj_ratio),
            ]
        })
        .collect();
    let mut out = table(
        &["iter", "seed", "round", "val F1", "val D_avg", "F1", "D_avg", "dampening", "LDJ ratio"],
        &rows,
    );
    let a = &report.aggregate;
    let _ = writeln!(out);
    let _ = writeln!(out, "F1          {}", stat(&a.f1));
    let _ = writeln!(out, "D_avg       {}", stat(&a.frechet_avg));
    let _ = writeln!(out, "dampening   {}", stat(&a.dampening_ratio));
    let _ = writeln!(out, "LDJ ratio   {}", stat(&a.ldj_ratio));
    let _ = writeln!(out, "val F1      {}", stat(&a.validation_f1));
    let _ = writeln!(out, "val D_avg   {}", stat(&a.validation_frechet_avg));
    out
}

pub fn leaderboard_table(board: &Leaderboard) -> String {
    let rows: Vec<Vec<String>> = board
        .entries
        .iter()
        .map(|e| {
            let c = &e.candidate;
            vec![
                e.rank.to_string(),
                e.candidate_index.to_string(),
                c.fourier_order.to_string(),
                c.reduction_dims.to_string(),
                c.markov_order.to_string(),
                format!("{:.3}", c.emission_variance),
                format!("{:.3}", c.dynamics_variance),
                c.fitc_fraction.map_or("full".into(), |f| format!("{f}")),
                opt(e.validation_f1),
                opt(e.validation_frechet_avg),
                e.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    table(
        &["rank", "cand", "m", "r", "order", "em var", "dyn var", "fitc", "val F1", "val D_avg", "error"],
        &rows,
    )
}
