//! CSV and flat-text serialization of run artifacts. Floats are written
//! with 17 significant digits so every value round-trips exactly through
//! text.

use std::io::Write;

use crate::detect::DetectabilityReport;
use crate::error::Result;
use crate::filter::RunResult;
use crate::lyapunov::LeHistory;

/// Round-trip-exact decimal rendering of a double.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// `t,lambda_1..lambda_k` running averages, one row per sample.
pub fn write_le_history_csv(w: &mut impl Write, history: &LeHistory) -> Result<()> {
    let k = history.values.first().map_or(0, Vec::len);
    write!(w, "t")?;
    for j in 1..=k {
        write!(w, ",lambda_{j}")?;
    }
    writeln!(w)?;
    for (t, row) in history.times.iter().zip(history.values.iter()) {
        write!(w, "{}", format_float(*t))?;
        for v in row {
            write!(w, ",{}", format_float(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `t,err_norm` per snapshot of a twin run.
pub fn write_run_csv(w: &mut impl Write, run: &RunResult) -> Result<()> {
    writeln!(w, "t,err_norm")?;
    for (t, e) in run.times.iter().zip(run.error_norms.iter()) {
        writeln!(w, "{},{}", format_float(*t), format_float(*e))?;
    }
    Ok(())
}

/// Per-member summary row of an ensemble.
#[derive(Debug, Clone)]
pub struct MemberSummary {
    pub member: usize,
    pub converged_at: Option<f64>,
    pub final_error: f64,
}

impl MemberSummary {
    pub fn from_run(member: usize, run: &RunResult) -> Self {
        Self {
            member,
            converged_at: run.converged_at,
            final_error: run.final_error,
        }
    }
}

/// `member,converged_at,final_error`; a member that never converged leaves
/// the middle field empty.
pub fn write_summary_csv(w: &mut impl Write, rows: &[MemberSummary]) -> Result<()> {
    writeln!(w, "member,converged_at,final_error")?;
    for row in rows {
        let converged = row.converged_at.map(format_float).unwrap_or_default();
        writeln!(
            w,
            "{},{},{}",
            row.member,
            converged,
            format_float(row.final_error)
        )?;
    }
    Ok(())
}

/// `direction,average,detectable` per tangent direction.
pub fn write_detect_csv(w: &mut impl Write, report: &DetectabilityReport) -> Result<()> {
    writeln!(w, "direction,average,detectable")?;
    for (j, (avg, flag)) in report
        .direction_averages
        .iter()
        .zip(report.per_direction.iter())
        .enumerate()
    {
        writeln!(w, "{},{},{}", j + 1, format_float(*avg), flag)?;
    }
    Ok(())
}

/// Flat key-value rendering of a detectability report.
pub fn detect_report_text(report: &DetectabilityReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("k = {}\n", report.k));
    out.push_str(&format!("k_star = {}\n", report.k_star));
    out.push_str(&format!("threshold = {}\n", format_float(report.threshold)));
    out.push_str(&format!(
        "necessary_condition = {}\n",
        report.necessary_condition
    ));
    out.push_str(&format!("verdict = {}\n", report.verdict));
    for (j, v) in report.le_values.iter().enumerate() {
        out.push_str(&format!("lambda_{} = {}\n", j + 1, format_float(*v)));
    }
    for (j, (avg, flag)) in report
        .direction_averages
        .iter()
        .zip(report.per_direction.iter())
        .enumerate()
    {
        out.push_str(&format!(
            "direction_{}_average = {}\n",
            j + 1,
            format_float(*avg)
        ));
        out.push_str(&format!("direction_{}_detectable = {}\n", j + 1, flag));
    }
    out
}
