use std::io::Write;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,split,loss,accuracy,lr,grad_norm";

pub fn write_metrics_csv(mut w: impl Write, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.split, r.loss, r.accuracy, r.lr, r.grad_norm
        )?;
    }
    Ok(())
}
