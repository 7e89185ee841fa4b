/// Linear warmup from 0 to `peak`, then cosine decay to `floor_fraction · peak` at `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, peak: f64, floor_fraction: f64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let floor = floor_fraction * peak;
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 || step >= total_steps {
        return if step >= total_steps && span > 0 { floor } else { peak };
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    peak - (peak - floor) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_schedule(0, 10, 100, 3e-4, 0.1), 0.0);
        assert_eq!(lr_schedule(10, 10, 100, 3e-4, 0.1), 3e-4);
        assert!((lr_schedule(100, 10, 100, 3e-4, 0.1) - 3e-5).abs() < 1e-18);
        assert!((lr_schedule(500, 10, 100, 3e-4, 0.1) - 3e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(5, 10, 100, 1.0, 0.1), 0.5);
    }

    #[test]
    fn non_increasing_after_warmup() {
        let lrs: Vec<f64> = (20..=400).map(|s| lr_schedule(s, 20, 400, 1e-3, 0.1)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn no_warmup() {
        assert_eq!(lr_schedule(0, 0, 10, 2.0, 0.1), 2.0);
    }
}
