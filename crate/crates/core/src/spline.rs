//! Natural cubic spline control paths.
//!
//! Each node and channel of an input window gets its own interpolant through
//! the observed (unmasked) grid points. Evaluation outside the knot range
//! continues linearly with the boundary slope, which keeps the path `C¹`
//! when leading or trailing observations are missing.

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("a spline needs at least 2 knots, got {0}")]
    InsufficientKnots(usize),
    #[error("knot times must be strictly increasing (index {index}: {prev} then {next})")]
    Ordering { index: usize, prev: f64, next: f64 },
    #[error("{times} knot times but {values} values")]
    LengthMismatch { times: usize, values: usize },
}

/// Piecewise cubic `a + bΔ + cΔ² + dΔ³` with `Δ = t - knots[i]` on segment `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoeffs {
    knots: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

/// Fits the natural cubic spline (zero second derivative at both ends).
pub fn fit_natural_cubic(times: &[f64], values: &[f64]) -> Result<SplineCoeffs, SplineError> {
    if times.len() != values.len() {
        return Err(SplineError::LengthMismatch {
            times: times.len(),
            values: values.len(),
        });
    }
    let k = times.len();
    if k < 2 {
        return Err(SplineError::InsufficientKnots(k));
    }
    for i in 1..k {
        if !(times[i] > times[i - 1]) {
            return Err(SplineError::Ordering {
                index: i,
                prev: times[i - 1],
                next: times[i],
            });
        }
    }

    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..k - 1).map(|i| (values[i + 1] - values[i]) / h[i]).collect();

    // Second derivatives at the knots; M[0] = M[k-1] = 0.
    let mut m = vec![0.0; k];
    let interior = k - 2;
    if interior > 0 {
        let sub: Vec<f64> = (1..interior).map(|i| h[i]).collect();
        let diag: Vec<f64> = (1..=interior).map(|i| 2.0 * (h[i - 1] + h[i])).collect();
        let sup: Vec<f64> = (1..interior).map(|i| h[i]).collect();
        let rhs: Vec<f64> = (1..=interior).map(|i| 6.0 * (slope[i] - slope[i - 1])).collect();
        let solved = solve_tridiagonal(&sub, &diag, &sup, &rhs);
        m[1..=interior].copy_from_slice(&solved);
    }

    let mut coeffs = SplineCoeffs {
        knots: times.to_vec(),
        a: Vec::with_capacity(k - 1),
        b: Vec::with_capacity(k - 1),
        c: Vec::with_capacity(k - 1),
        d: Vec::with_capacity(k - 1),
    };
    for i in 0..k - 1 {
        coeffs.a.push(values[i]);
        coeffs.b.push(slope[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0);
        coeffs.c.push(m[i] / 2.0);
        coeffs.d.push((m[i + 1] - m[i]) / (6.0 * h[i]));
    }
    Ok(coeffs)
}

/// Thomas algorithm. `sub` and `sup` are one shorter than `diag`.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    c_prime[0] = if n > 1 { sup[0] / diag[0] } else { 0.0 };
    d_prime[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i - 1] * c_prime[i - 1];
        if i < n - 1 {
            c_prime[i] = sup[i] / denom;
        }
        d_prime[i] = (rhs[i] - sub[i - 1] * d_prime[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d_prime[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d_prime[i] - c_prime[i] * x[i + 1];
    }
    x
}

impl SplineCoeffs {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn segments(&self) -> usize {
        self.a.len()
    }

    /// `(a, b, c, d)` of segment `i`.
    pub fn segment(&self, i: usize) -> (f64, f64, f64, f64) {
        (self.a[i], self.b[i], self.c[i], self.d[i])
    }

    fn locate(&self, t: f64) -> usize {
        // Last segment whose left knot is <= t.
        let idx = self.knots.partition_point(|&k| k <= t);
        idx.saturating_sub(1).min(self.segments() - 1)
    }

    fn first(&self) -> f64 {
        self.knots[0]
    }

    fn last(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    fn cubic(&self, i: usize, t: f64) -> f64 {
        let dt = t - self.knots[i];
        self.a[i] + dt * (self.b[i] + dt * (self.c[i] + dt * self.d[i]))
    }

    fn cubic_slope(&self, i: usize, t: f64) -> f64 {
        let dt = t - self.knots[i];
        self.b[i] + dt * (2.0 * self.c[i] + 3.0 * self.d[i] * dt)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let last_seg = self.segments() - 1;
        if t < self.first() {
            self.a[0] + self.b[0] * (t - self.first())
        } else if t > self.last() {
            let end = self.last();
            self.cubic(last_seg, end) + self.cubic_slope(last_seg, end) * (t - end)
        } else {
            self.cubic(self.locate(t), t)
        }
    }

    pub fn eval_derivative(&self, t: f64) -> f64 {
        let last_seg = self.segments() - 1;
        if t < self.first() {
            self.b[0]
        } else if t > self.last() {
            self.cubic_slope(last_seg, self.last())
        } else {
            self.cubic_slope(self.locate(t), t)
        }
    }

    /// Second derivative; zero outside the knot range.
    pub fn eval_second_derivative(&self, t: f64) -> f64 {
        if t < self.first() || t > self.last() {
            return 0.0;
        }
        let i = self.locate(t);
        2.0 * self.c[i] + 6.0 * self.d[i] * (t - self.knots[i])
    }

    /// Value, slope and curvature at the right end of segment `i`, evaluated
    /// with that segment's own polynomial.
    pub fn segment_end(&self, i: usize) -> (f64, f64, f64) {
        let t = self.knots[i + 1];
        let dt = t - self.knots[i];
        (
            self.cubic(i, t),
            self.cubic_slope(i, t),
            2.0 * self.c[i] + 6.0 * self.d[i] * dt,
        )
    }
}

/// One channel of one node.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPath {
    Spline(SplineCoeffs),
    Constant(f64),
}

impl ChannelPath {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::Spline(s) => s.eval(t),
            Self::Constant(c) => *c,
        }
    }

    pub fn eval_derivative(&self, t: f64) -> f64 {
        match self {
            Self::Spline(s) => s.eval_derivative(t),
            Self::Constant(_) => 0.0,
        }
    }
}

/// Continuous control path `X(t)` for one window: a `|V|×D` grid of channel
/// interpolants on the time grid `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    channels: Vec<ChannelPath>,
    num_nodes: usize,
    num_features: usize,
    horizon: f64,
}

impl ControlPath {
    /// `window` is `|V|×(N+1)×D`, `mask` is `|V|×(N+1)` (true = observed).
    /// Channels with fewer than two observations become constant: at the
    /// single observed value, or at `fill_value` when nothing was observed.
    pub fn build(window: &Tensor, mask: &[bool], fill_value: &[f64]) -> Self {
        let &[num_nodes, len, num_features] = window.shape() else {
            panic!("window must be |V|×(N+1)×D, got {:?}", window.shape());
        };
        assert_eq!(mask.len(), num_nodes * len, "mask must be |V|×(N+1)");
        assert_eq!(fill_value.len(), num_features);
        let data = window.data();

        let mut channels = Vec::with_capacity(num_nodes * num_features);
        let mut times = Vec::with_capacity(len);
        let mut values = Vec::with_capacity(len);
        for v in 0..num_nodes {
            let node_mask = &mask[v * len..(v + 1) * len];
            for f in 0..num_features {
                times.clear();
                values.clear();
                for (i, _) in node_mask.iter().enumerate().filter(|(_, &m)| m) {
                    times.push(i as f64);
                    values.push(data[(v * len + i) * num_features + f]);
                }
                let path = match values.len() {
                    0 => ChannelPath::Constant(fill_value[f]),
                    1 => ChannelPath::Constant(values[0]),
                    _ => ChannelPath::Spline(
                        fit_natural_cubic(&times, &values).expect("grid knots are increasing"),
                    ),
                };
                channels.push(path);
            }
        }
        Self {
            channels,
            num_nodes,
            num_features,
            horizon: (len - 1) as f64,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// `N`, the right end of the time grid.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn channel(&self, node: usize, feature: usize) -> &ChannelPath {
        &self.channels[node * self.num_features + feature]
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.channels) {
            *o = c.eval(t);
        }
    }

    pub fn derivative_into(&self, t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.channels) {
            *o = c.eval_derivative(t);
        }
    }

    /// `X(t)` as a `|V|×D` tensor.
    pub fn eval(&self, t: f64) -> Tensor {
        let mut out = vec![0.0; self.channels.len()];
        self.eval_into(t, &mut out);
        Tensor::new(&[self.num_nodes, self.num_features], out).expect("consistent shape")
    }

    /// `dX(t)/dt` as a `|V|×D` tensor.
    pub fn derivative(&self, t: f64) -> Tensor {
        let mut out = vec![0.0; self.channels.len()];
        self.derivative_into(t, &mut out);
        Tensor::new(&[self.num_nodes, self.num_features], out).expect("consistent shape")
    }
}

/// Stacks `X(t)` of a batch of paths into a `(B·|V|)×D` tensor.
pub fn stack_eval(paths: &[ControlPath], t: f64) -> Tensor {
    stack_with(paths, |p, out| p.eval_into(t, out))
}

/// Stacks `dX(t)/dt` of a batch of paths into a `(B·|V|)×D` tensor.
pub fn stack_derivative(paths: &[ControlPath], t: f64) -> Tensor {
    stack_with(paths, |p, out| p.derivative_into(t, out))
}

fn stack_with(paths: &[ControlPath], fill: impl Fn(&ControlPath, &mut [f64])) -> Tensor {
    let first = &paths[0];
    let per = first.num_nodes * first.num_features;
    let mut data = vec![0.0; per * paths.len()];
    for (p, chunk) in paths.iter().zip(data.chunks_exact_mut(per)) {
        fill(p, chunk);
    }
    Tensor::new(&[paths.len() * first.num_nodes, first.num_features], data)
        .expect("consistent shape")
}
