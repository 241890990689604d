//! CSV reports of a training run.

use std::io::Write;

use crate::engine::{CycleReport, EpochMetrics};
use crate::error::{Error, Result};

fn hidden_list(h: &[(usize, usize)]) -> String {
    h.iter().map(|(s, n)| format!("{s}:{n}")).collect::<Vec<_>>().join(" ")
}

pub fn write_metrics_csv<W: Write>(epochs: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cycle", "epoch", "lr", "train_loss", "train_acc", "val_acc"])?;
    for m in epochs {
        w.write_record([
            m.cycle.to_string(),
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.train_acc.to_string(),
            m.val_acc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Per-adapter sizes are written as space-separated `slot:N` pairs.
pub fn write_cycles_csv<W: Write>(cycles: &[CycleReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "cycle",
        "sigma_before",
        "sigma_after",
        "hidden_before",
        "hidden_after",
        "removed",
        "train_acc",
        "val_acc",
        "test_acc",
        "trainable_params",
        "wall_clock_secs",
        "cycles_paper",
        "cycles_simulated",
    ])?;
    for c in cycles {
        w.write_record([
            c.cycle.to_string(),
            c.sigma_before.to_string(),
            c.sigma_after.to_string(),
            hidden_list(&c.hidden_before),
            hidden_list(&c.hidden_after),
            c.removed.to_string(),
            c.train_acc.to_string(),
            c.val_acc.to_string(),
            c.test_acc.to_string(),
            c.trainable_params.to_string(),
            c.wall_clock_secs.to_string(),
            c.cycles_paper.to_string(),
            c.cycles_simulated.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycles_csv_layout() {
        let c = CycleReport {
            cycle: 1,
            sigma_before: 8.0,
            sigma_after: f64::INFINITY,
            hidden_before: vec![(0, 4), (1, 4)],
            hidden_after: vec![(0, 0), (1, 0)],
            removed: 8,
            train_acc: 0.5,
            val_acc: f64::NAN,
            test_acc: 0.25,
            trainable_params: 10,
            wall_clock_secs: 0.0,
            cycles_paper: 1,
            cycles_simulated: 2,
        };
        let mut buf = Vec::new();
        write_cycles_csv(&[c], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(1).unwrap(), "1,8,inf,0:4 1:4,0:0 1:0,8,0.5,NaN,0.25,10,0,1,2");
    }
}
