//! Metrics CSV: one row per evaluated (round, tier).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "round,method,tier,local_acc,global_acc,exploration_rate,mask_churn,train_loss";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub method: String,
    pub tier: f64,
    pub local_acc: Option<f64>,
    pub global_acc: f64,
    pub exploration_rate: f64,
    /// Empty on a tier's first round.
    pub mask_churn: Option<f64>,
    /// Empty when no client of the tier took part in the round.
    pub train_loss: Option<f64>,
}

/// `%g`-style rendering with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let sci = format!("{x:.5e}");
    // rounding may have bumped the exponent (e.g. 9.999996 -> 1.00000e1)
    let exp = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    let text = if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    };
    trim_zeros(text)
}

fn trim_zeros(s: String) -> String {
    if let Some((mantissa, exp)) = s.split_once('e') {
        return format!("{}e{exp}", trim_zeros(mantissa.to_string()));
    }
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig6).unwrap_or_default()
}

pub fn write_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    out.write_all(CSV_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.method,
            fmt_sig6(r.tier),
            opt(r.local_acc),
            fmt_sig6(r.global_acc),
            fmt_sig6(r.exploration_rate),
            opt(r.mask_churn),
            opt(r.train_loss),
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    write_csv(rows, BufWriter::new(File::create(path)?))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    if rdr.headers()?.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::invalid("unexpected metrics header"));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad number `{s}` in metrics csv")))
    };
    let opt_num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(MetricRow {
            round: rec[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad round `{}`", &rec[0])))?,
            method: rec[1].to_string(),
            tier: num(&rec[2])?,
            local_acc: opt_num(&rec[3])?,
            global_acc: num(&rec[4])?,
            exploration_rate: num(&rec[5])?,
            mask_churn: opt_num(&rec[6])?,
            train_loss: opt_num(&rec[7])?,
        });
    }
    Ok(rows)
}

/// `gamma,global_acc` rows of a capacity sweep.
pub fn write_sweep<W: Write>(points: &[(f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "gamma,global_acc")?;
    for (g, a) in points {
        writeln!(out, "{},{}", fmt_sig6(*g), fmt_sig6(*a))?;
    }
    out.flush()?;
    Ok(())
}
