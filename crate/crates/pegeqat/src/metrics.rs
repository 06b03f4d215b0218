//! Per-evaluation training metrics and CSV emission.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    /// Top-1 accuracies in percent.
    pub train_acc: f64,
    pub test_acc: f64,
    pub p_t: f64,
    pub mu_t: f64,
    pub lr: f64,
    /// Mean |x_c - x_q| per quantized layer (weight quantizers), by name.
    pub disc_err: Vec<(String, f64)>,
    /// Wall-clock seconds since training started; 0 in deterministic mode.
    pub secs: f64,
}

impl MetricsRecord {
    /// Mean over layers; exactly 0 when nothing is quantized.
    pub fn disc_err_mean(&self) -> f64 {
        if self.disc_err.is_empty() {
            return 0.0;
        }
        self.disc_err.iter().map(|(_, e)| e).sum::<f64>() / self.disc_err.len() as f64
    }

    fn validate(&self) -> Result<()> {
        for (what, v) in [("train_acc", self.train_acc), ("test_acc", self.test_acc)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Contract(format!("{what} = {v} outside [0, 100]")));
            }
        }
        if self.disc_err.iter().any(|(_, e)| *e < 0.0) {
            return Err(Error::Contract("negative discretization error".into()));
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "epoch,step,train_loss,train_acc,test_acc,p_t,mu_t,lr,disc_err_mean,secs";

pub fn to_csv(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Contract("empty metrics series".into()));
    }
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        r.validate()?;
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch,
            r.step,
            r.train_loss,
            r.train_acc,
            r.test_acc,
            r.p_t,
            r.mu_t,
            r.lr,
            r.disc_err_mean(),
            r.secs
        ));
    }
    Ok(s)
}

pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let csv = to_csv(records)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, p_t: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            step: (epoch as u64 + 1) * 10,
            train_loss: 1.5,
            train_acc: 50.0,
            test_acc: 40.0,
            p_t,
            mu_t: 0.05,
            lr: 1e-3,
            disc_err: vec![("conv2".into(), 0.08), ("conv3".into(), 0.04)],
            secs: 0.0,
        }
    }

    #[test]
    fn single_record_emits_header_plus_row() {
        let csv = to_csv(&[rec(0, 0.3)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("0,10,1.500000,"));
    }

    #[test]
    fn re_emission_is_identical() {
        let records = vec![rec(0, 0.3), rec(1, 0.5)];
        assert_eq!(to_csv(&records).unwrap(), to_csv(&records).unwrap());
    }

    #[test]
    fn empty_series_is_an_error() {
        assert!(to_csv(&[]).is_err());
    }

    #[test]
    fn disc_err_mean_averages_layers() {
        let r = rec(0, 0.3);
        assert!((r.disc_err_mean() - 0.06).abs() < 1e-12);
        let mut r2 = rec(0, 0.3);
        r2.disc_err.clear();
        assert_eq!(r2.disc_err_mean(), 0.0);
    }

    #[test]
    fn out_of_range_accuracy_is_rejected() {
        let mut r = rec(0, 0.3);
        r.test_acc = 101.0;
        assert!(to_csv(&[r]).is_err());
    }
}
