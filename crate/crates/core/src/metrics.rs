//! Clean and adversarial accuracy, percentage-point deltas, Pearson
//! correlation over pruning trajectories, and the FGSM transfer matrix.

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackKind, AttackSpec};
use crate::data::DatasetSplit;
use crate::error::{invalid, Error, Result};
use crate::network::Network;
use crate::train::{correct_count, evaluate};

/// Accuracy of `net` on `data` after applying `spec`. FGSM uses `source`
/// when given, otherwise `net` itself (white-box).
pub fn evaluate_under_attack(
    net: &Network,
    data: &DatasetSplit,
    spec: &AttackSpec,
    source: Option<&Network>,
    seed: u64,
) -> Result<f64> {
    data.ensure_unaugmented("evaluate_under_attack")?;
    if data.is_empty() {
        return Err(invalid("evaluate_under_attack", "split is empty"));
    }
    let source = source.unwrap_or(net);
    let adv = attacks::apply(&spec.kind, source, &data.images, &data.labels, seed)?;
    Ok(correct_count(net, &data.with_images(adv)?)? as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub attack: String,
    pub spec: AttackSpec,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: String,
    pub seed: u64,
    pub acc_clean: f64,
    /// One entry per attack, in the order the attacks were given.
    pub acc_adv: Vec<AttackAccuracy>,
}

impl EvalReport {
    pub fn adv(&self, attack: &str) -> Option<f64> {
        self.acc_adv
            .iter()
            .find(|a| a.attack == attack)
            .map(|a| a.accuracy)
    }

    pub fn attack_tags(&self) -> Vec<&str> {
        self.acc_adv.iter().map(|a| a.attack.as_str()).collect()
    }
}

/// Clean accuracy plus accuracy under every attack in `attacks`.
pub fn evaluate_report(
    net: &Network,
    model_tag: &str,
    data: &DatasetSplit,
    attacks: &[AttackSpec],
    seed: u64,
) -> Result<EvalReport> {
    let acc_clean = evaluate(net, data)?;
    let acc_adv = attacks
        .iter()
        .map(|spec| {
            Ok(AttackAccuracy {
                attack: spec.kind.tag().to_string(),
                spec: spec.clone(),
                accuracy: evaluate_under_attack(net, data, spec, None, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        model_tag: model_tag.to_string(),
        seed,
        acc_clean,
        acc_adv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    /// `clean` or an attack tag.
    pub column: String,
    pub unpruned: f64,
    pub pruned: f64,
    /// `(pruned - unpruned) * 100`
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub unpruned_tag: String,
    pub pruned_tag: String,
    /// Clean first, then attacks in the unpruned report's order.
    pub rows: Vec<DeltaRow>,
    pub avg_with_clean: f64,
    pub avg_attacks_only: f64,
}

impl DeltaReport {
    pub fn row(&self, column: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.column == column)
    }
}

/// Per-column differences `pruned - unpruned` in percentage points.
pub fn delta_report(unpruned: &EvalReport, pruned: &EvalReport) -> Result<DeltaReport> {
    let (mut a, mut b) = (unpruned.attack_tags(), pruned.attack_tags());
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(invalid(
            "delta_report",
            format!("attack sets differ: {a:?} vs {b:?}"),
        ));
    }
    let row = |column: &str, u: f64, p: f64| DeltaRow {
        column: column.to_string(),
        unpruned: u,
        pruned: p,
        delta_pp: (p - u) * 100.0,
    };
    let mut rows = vec![row("clean", unpruned.acc_clean, pruned.acc_clean)];
    for entry in &unpruned.acc_adv {
        let p = pruned.adv(&entry.attack).expect("attack sets checked");
        rows.push(row(&entry.attack, entry.accuracy, p));
    }
    let mean = |xs: &[DeltaRow]| xs.iter().map(|r| r.delta_pp).sum::<f64>() / xs.len() as f64;
    let avg_attacks_only = if rows.len() > 1 {
        mean(&rows[1..])
    } else {
        0.0
    };
    Ok(DeltaReport {
        unpruned_tag: unpruned.model_tag.clone(),
        pruned_tag: pruned.model_tag.clone(),
        avg_with_clean: mean(&rows),
        avg_attacks_only,
        rows,
    })
}

/// Two decimals, rounding the exact binary value with ties to even.
pub fn round_half_even_2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// `(+) 0.60`, `(-) 2.21`, or `0.00`.
pub fn format_pp(delta: f64) -> String {
    let s = round_half_even_2(delta);
    match s.strip_prefix('-') {
        Some(abs) => format!("(-) {abs}"),
        None if s == "0.00" => s,
        None => format!("(+) {s}"),
    }
}

/// Sample Pearson correlation in double precision.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(invalid(
            "pearson_r",
            format!("{} vs {} values", xs.len(), ys.len()),
        ));
    }
    if xs.len() < 2 {
        return Err(invalid("pearson_r", "needs at least 2 points"));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson_r"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Rows are sources, columns are targets; cell `(s, t)` is the accuracy of
/// `t` on FGSM images crafted from `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub tags: Vec<String>,
    pub alpha: f32,
    pub cells: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn cell(&self, source: &str, target: &str) -> Option<f64> {
        let s = self.tags.iter().position(|t| t == source)?;
        let t = self.tags.iter().position(|t| t == target)?;
        Some(self.cells[s][t])
    }
}

/// Crafts one FGSM batch per source and reuses it for every target.
pub fn transfer_matrix(
    models: &[(String, &Network)],
    data: &DatasetSplit,
    alpha: f32,
) -> Result<TransferMatrix> {
    if models.len() < 2 {
        return Err(invalid("transfer_matrix", "needs at least 2 models"));
    }
    data.ensure_unaugmented("transfer_matrix")?;
    let (first_tag, first) = &models[0];
    for (tag, m) in &models[1..] {
        if m.num_classes() != first.num_classes() {
            return Err(invalid(
                "transfer_matrix",
                format!(
                    "`{tag}` has {} classes, `{first_tag}` has {}",
                    m.num_classes(),
                    first.num_classes()
                ),
            ));
        }
        let (a, b) = (&m.arch, &first.arch);
        if (a.input_channels, a.input_side) != (b.input_channels, b.input_side) {
            return Err(invalid(
                "transfer_matrix",
                format!("`{tag}` input differs from `{first_tag}`"),
            ));
        }
    }
    let mut cells = Vec::with_capacity(models.len());
    for (_, source) in models {
        let adv = data.with_images(attacks::fgsm(*source, &data.images, &data.labels, alpha)?)?;
        let row = models
            .iter()
            .map(|(_, target)| Ok(correct_count(target, &adv)? as f64 / adv.len() as f64))
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    Ok(TransferMatrix {
        tags: models.iter().map(|(t, _)| t.clone()).collect(),
        alpha,
        cells,
    })
}

/// Fixed six-decimal rendering for accuracies in CSV output.
pub fn fmt_acc(x: f64) -> String {
    format!("{x:.6}")
}

pub(crate) fn write_csv(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// One row per column of the report (clean first, then attacks).
pub fn eval_report_csv(report: &EvalReport) -> Result<String> {
    let mut rows = vec![vec![
        report.model_tag.clone(),
        "clean".into(),
        fmt_acc(report.acc_clean),
    ]];
    for a in &report.acc_adv {
        rows.push(vec![
            report.model_tag.clone(),
            a.attack.clone(),
            fmt_acc(a.accuracy),
        ]);
    }
    write_csv(&strings(&["model", "attack", "accuracy"]), &rows)
}

/// One row per column of the delta report, plus both averages.
pub fn delta_report_csv(report: &DeltaReport) -> Result<String> {
    let mut rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.column.clone(),
                fmt_acc(r.unpruned),
                fmt_acc(r.pruned),
                round_half_even_2(r.delta_pp),
                format_pp(r.delta_pp),
            ]
        })
        .collect();
    for (name, v) in [
        ("avg_with_clean", report.avg_with_clean),
        ("avg_attacks_only", report.avg_attacks_only),
    ] {
        rows.push(vec![
            name.into(),
            String::new(),
            String::new(),
            round_half_even_2(v),
            format_pp(v),
        ]);
    }
    write_csv(
        &strings(&["attack", "unpruned", "pruned", "delta_pp", "signed"]),
        &rows,
    )
}

/// Table layout: one row per labelled delta report, one column per attack
/// plus clean and both averages, cells as signed percentage points.
pub fn delta_table_csv(rows: &[(String, DeltaReport)]) -> Result<String> {
    let Some((_, first)) = rows.first() else {
        return Err(invalid("delta_table_csv", "no rows"));
    };
    let columns: Vec<String> = first.rows.iter().map(|r| r.column.clone()).collect();
    let mut header = vec!["row".to_string()];
    header.extend(columns.iter().cloned());
    header.extend(strings(&["avg_with_clean", "avg_attacks_only"]));
    let body = rows
        .iter()
        .map(|(label, rep)| {
            let mut r = vec![label.clone()];
            for c in &columns {
                let row = rep.row(c).ok_or_else(|| {
                    invalid("delta_table_csv", format!("`{label}` lacks column `{c}`"))
                })?;
                r.push(format_pp(row.delta_pp));
            }
            r.push(format_pp(rep.avg_with_clean));
            r.push(format_pp(rep.avg_attacks_only));
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&header, &body)
}

/// Sources as rows, targets as columns.
pub fn transfer_csv(m: &TransferMatrix) -> Result<String> {
    let mut header = vec!["source".to_string()];
    header.extend(m.tags.iter().cloned());
    let rows: Vec<Vec<String>> = m
        .tags
        .iter()
        .zip(&m.cells)
        .map(|(tag, row)| {
            std::iter::once(tag.clone())
                .chain(row.iter().map(|&v| fmt_acc(v)))
                .collect()
        })
        .collect();
    write_csv(&header, &rows)
}

/// `r` rendered for CSV: six decimals, or `undefined`.
pub fn fmt_r(r: &Result<f64>) -> String {
    match r {
        Ok(v) => format!("{v:.6}"),
        Err(_) => "undefined".into(),
    }
}

/// One point per pruning iteration: clean and per-attack accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub iteration: usize,
    pub report: EvalReport,
}

/// Pearson r between clean accuracy and each attack's accuracy across the
/// points, in the attack order of the first point.
pub fn correlate(points: &[CorrelationPoint]) -> Result<Vec<(String, Result<f64>)>> {
    if points.len() < 2 {
        return Err(invalid(
            "correlate",
            format!("needs at least 2 iterations, got {}", points.len()),
        ));
    }
    let clean: Vec<f64> = points.iter().map(|p| p.report.acc_clean).collect();
    points[0]
        .report
        .acc_adv
        .iter()
        .map(|a| {
            let ys = points
                .iter()
                .map(|p| {
                    p.report.adv(&a.attack).ok_or_else(|| {
                        invalid(
                            "correlate",
                            format!("iteration {} lacks `{}`", p.iteration, a.attack),
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((a.attack.clone(), pearson_r(&clean, &ys)))
        })
        .collect()
}

/// Scatter data (`iteration, acc_clean, acc_<attack>...`) with an `r`
/// footer row.
pub fn correlation_csv(points: &[CorrelationPoint]) -> Result<String> {
    let rs = correlate(points)?;
    let mut header = strings(&["iteration", "acc_clean"]);
    header.extend(rs.iter().map(|(a, _)| format!("acc_{a}")));
    let mut rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut r = vec![p.iteration.to_string(), fmt_acc(p.report.acc_clean)];
            r.extend(
                rs.iter()
                    .map(|(a, _)| fmt_acc(p.report.adv(a).expect("checked in correlate"))),
            );
            r
        })
        .collect();
    let mut footer = vec!["r".to_string(), String::new()];
    footer.extend(rs.iter().map(|(_, r)| fmt_r(r)));
    rows.push(footer);
    write_csv(&header, &rows)
}

/// Whether every attack's tag is unique in `attacks`.
pub fn distinct_tags(attacks: &[AttackSpec]) -> bool {
    let mut tags: Vec<&str> = attacks.iter().map(|a| a.kind.tag()).collect();
    tags.sort_unstable();
    tags.windows(2).all(|w| w[0] != w[1])
}

/// The default attack suite as white-box specs.
pub fn default_attacks(image_side: usize) -> Vec<AttackSpec> {
    AttackKind::default_suite(image_side)
        .into_iter()
        .map(AttackSpec::white_box)
        .collect()
}
