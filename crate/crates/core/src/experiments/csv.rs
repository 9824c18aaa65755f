use std::fmt::Write as _;
use std::path::Path;

use crate::dp::{convert, rdp_subsampled_gaussian, PrivacyLedger};
use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: &str =
    "run_id,seed,epoch,spent_epsilon,train_loss,test_loss,train_acc,test_acc,wall_ms";
pub const LEDGER_HEADER: &str = "step,q,sigma,spent_epsilon";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub run_id: String,
    pub seed: u64,
    /// Epoch, or round in federated runs; starts at 1.
    pub epoch: usize,
    /// Empty when privacy is off.
    pub spent_epsilon: Option<f64>,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_ms: u64,
}

/// C-style `%.{digits}g`.
pub fn format_g(v: f64, digits: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn g6(v: f64) -> String {
    format_g(v, 6)
}

/// CSV text for `rows` in (run_id, seed, epoch) order.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut sorted: Vec<&TrajectoryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.run_id, a.seed, a.epoch).cmp(&(&b.run_id, b.seed, b.epoch)));
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.seed,
            r.epoch,
            r.spent_epsilon.map(g6).unwrap_or_default(),
            g6(r.train_loss),
            g6(r.test_loss),
            g6(r.train_acc),
            g6(r.test_acc),
            r.wall_ms
        );
    }
    out
}

pub fn emit_csv(rows: &[TrajectoryRow], path: &Path) -> Result<()> {
    write_text(path, &trajectory_csv(rows))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Per-step ledger dump with the cumulative ε after each step.
pub fn ledger_csv(ledger: &PrivacyLedger, delta: f64) -> Result<String> {
    let orders = ledger.orders();
    let mut totals = vec![0.0; orders.len()];
    let mut cached: Option<((u64, u64), Vec<f64>)> = None;
    let mut out = String::from(LEDGER_HEADER);
    out.push('\n');
    for (i, r) in ledger.records().iter().enumerate() {
        let key = (r.q.to_bits(), r.sigma.to_bits());
        if cached.as_ref().map(|c| c.0) != Some(key) {
            let per = orders
                .iter()
                .map(|&a| rdp_subsampled_gaussian(r.q, r.sigma, a))
                .collect::<Result<Vec<_>>>()?;
            cached = Some((key, per));
        }
        for (t, p) in totals
            .iter_mut()
            .zip(&cached.as_ref().expect("filled above").1)
        {
            *t += p;
        }
        let (eps, _) = convert(orders, &totals, delta)?;
        let _ = writeln!(out, "{},{},{},{}", i + 1, g6(r.q), g6(r.sigma), g6(eps));
    }
    Ok(out)
}
