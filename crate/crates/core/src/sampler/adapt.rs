//! Warmup adaptation: dual averaging of the step size and windowed
//! estimation of a diagonal inverse mass matrix.

#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub(crate) fn new(target: f64) -> Self {
        DualAveraging {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 0.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    pub(crate) fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Next step size given the latest mean acceptance statistic.
    pub(crate) fn learn(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let w = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - w) * self.s_bar + w * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_w) * self.x_bar + x_w * x;
        x.exp()
    }

    pub(crate) fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator of per-coordinate variances.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let nf = self.n as f64;
        for ((m, s), &xi) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = xi - *m;
            *m += d / nf;
            *s += d * (xi - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        let denom = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }
}

/// Expanding windows: a fast initial buffer for the step size, slow windows
/// of doubling length for the variance, and a terminal buffer.
#[derive(Debug, Clone)]
pub(crate) struct MassAdaptation {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    estimator: Welford,
    enabled: bool,
}

impl MassAdaptation {
    pub(crate) fn new(dim: usize, warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        let enabled = warmup >= 20;
        if init_buffer + base + term_buffer > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup - (init_buffer + term_buffer);
        }
        MassAdaptation {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window: init_buffer + base - 1,
            counter: 0,
            estimator: Welford::new(dim),
            enabled,
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer && self.counter < self.warmup - self.term_buffer && self.counter != self.warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Records one warmup position; returns a new regularized inverse mass
    /// diagonal when a slow window closes.
    pub(crate) fn observe(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        if !self.enabled {
            return None;
        }
        if self.in_window() {
            self.estimator.add(q);
        }
        let out = if self.window_ends() {
            self.compute_next_window();
            let n = self.estimator.n as f64;
            let var = self
                .estimator
                .variance()
                .into_iter()
                .map(|v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0)))
                .collect();
            self.estimator = Welford::new(self.estimator.mean.len());
            Some(var)
        } else {
            None
        };
        self.counter += 1;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_schedule_for_default_warmup() {
        let mut m = MassAdaptation::new(1, 1000);
        let mut ends = Vec::new();
        for i in 0..1000 {
            if m.observe(&[i as f64]).is_some() {
                ends.push(i);
            }
        }
        assert_eq!(ends, vec![99, 149, 249, 449, 949]);
    }

    #[test]
    fn short_warmup_rescales_buffers() {
        let mut m = MassAdaptation::new(1, 100);
        let ends: Vec<usize> = (0..100).filter(|&i| m.observe(&[i as f64]).is_some()).collect();
        assert_eq!(ends, vec![89]);
    }

    #[test]
    fn regularized_variance() {
        let mut m = MassAdaptation::new(1, 100);
        let mut last = None;
        for i in 0..100 {
            let x = if i % 2 == 0 { 1.0 } else { -1.0 };
            if let Some(v) = m.observe(&[x]) {
                last = Some(v[0]);
            }
        }
        // Iterations 15..=89: 38 draws of -1 and 37 of +1.
        let n = 75.0;
        let var = (75.0 - 1.0 / 75.0) / 74.0;
        let expected = n / (n + 5.0) * var + 1e-3 * 5.0 / (n + 5.0);
        assert!((last.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut da = DualAveraging::new(0.8);
        da.restart(1.0);
        let up = da.learn(1.0);
        let mut da2 = DualAveraging::new(0.8);
        da2.restart(1.0);
        let down = da2.learn(0.1);
        assert!(up > down);
    }
}
