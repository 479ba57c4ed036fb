//! CSV traces and JSON reports.
//!
//! Numbers in CSV files are written with 17 significant digits so that they
//! round-trip exactly; JSON numbers use serde_json's shortest round-trip
//! form. Either way identical runs give identical bytes.

use std::fs;
use std::io;
use std::path::Path;

use gradflow_core::flow::FlowTrajectory;
use gradflow_core::msa::IterRecord;
use serde_json::Value;

pub const MSA_HEADER: &str = "iter,J,grad_norm_sq,step_norm_sq,tau_used";
pub const FLOW_HEADER: &str = "s,J,grad_norm_sq";

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn msa_trace_csv(records: &[IterRecord]) -> String {
    let mut out = String::from(MSA_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter,
            fmt_num(r.j),
            fmt_num(r.grad_norm_sq),
            fmt_num(r.step_norm_sq),
            fmt_num(r.tau_used)
        ));
    }
    out
}

pub fn flow_trace_csv(traj: &FlowTrajectory) -> String {
    let mut out = String::from(FLOW_HEADER);
    out.push('\n');
    for ((s, j), g) in traj.s_nodes.iter().zip(&traj.j_trace).zip(&traj.grad_norm_sq_trace) {
        out.push_str(&format!("{},{},{}\n", fmt_num(*s), fmt_num(*j), fmt_num(*g)));
    }
    out
}

/// Generic two-or-more column table.
pub fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_num(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Rows of a numeric CSV body, header skipped.
pub fn csv_all_finite(text: &str) -> bool {
    text.lines()
        .skip(1)
        .flat_map(|l| l.split(','))
        .all(|c| c.parse::<f64>().is_ok_and(f64::is_finite))
}

/// `serde_json` turns non-finite floats into `null`; a report with a `null`
/// where a number was meant is treated as non-finite.
pub fn json_all_finite(v: &Value) -> bool {
    match v {
        Value::Null => false,
        Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        Value::Array(a) => a.iter().all(json_all_finite),
        Value::Object(o) => o.iter().all(|(k, v)| k == "config" || json_all_finite(v)),
        _ => true,
    }
}

pub fn write(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)
}

pub fn json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.0, f64::MIN_POSITIVE] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_num(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn msa_csv_layout() {
        let rec = IterRecord {
            iter: 3,
            j: 0.25,
            grad_norm_sq: 1.0,
            step_norm_sq: 0.0,
            tau_used: 0.2,
        };
        let text = msa_trace_csv(&[rec]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(MSA_HEADER));
        assert_eq!(
            lines.next(),
            Some("3,2.5000000000000000e-1,1.0000000000000000e0,0.0000000000000000e0,2.0000000000000001e-1")
        );
        assert!(csv_all_finite(&text));
        assert!(!csv_all_finite(&table_csv(&["a"], &[vec![f64::NAN]])));
    }

    #[test]
    fn null_numbers_are_not_finite() {
        let v = serde_json::json!({"config": {"x": null}, "a": [1.0, 2.0]});
        assert!(json_all_finite(&v));
        let v = serde_json::json!({"a": [1.0, f64::INFINITY]});
        assert!(!json_all_finite(&v));
    }
}
