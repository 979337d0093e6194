#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgncde::autodiff::{Tape, Tensor, Var};
use stgncde::model::{ModelDims, ModelParams, Stgncde, Variant};
use stgncde::solver::{Method, SolverConfig};
use stgncde::spline::ControlPath;
use stgncde::train::l1_loss;

/// |V| = 4, N = 11, D = 1, dim(h) = dim(z) = 8, K = 1, C = 2.
pub fn tiny_dims() -> ModelDims {
    ModelDims {
        num_nodes: 4,
        input_dim: 1,
        output_dim: 1,
        horizon: 12,
        dim_h: 8,
        dim_z: 8,
        k_layers: 1,
        embed_dim: 2,
    }
}

pub fn rk4() -> SolverConfig {
    SolverConfig {
        method: Method::Rk4,
        steps_per_unit: 1,
    }
}

/// Random fully observed windows `nodes×12×d` and targets `batch×nodes×12×m`.
pub fn random_batch(dims: &ModelDims, batch: usize, seed: u64) -> (Vec<ControlPath>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (dims.num_nodes, dims.input_dim);
    let paths = (0..batch)
        .map(|_| {
            let window = Tensor::from_fn(&[v, 12, d], |_| rng.gen_range(-1.5..1.5));
            ControlPath::build(&window, &vec![true; v * 12], &vec![0.0; d])
        })
        .collect();
    let target = Tensor::from_fn(&[batch, v, dims.horizon, dims.output_dim], |_| rng.gen_range(-1.0..1.0));
    (paths, target)
}

pub fn tiny_model(variant: Variant, seed: u64) -> Stgncde {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Stgncde::new(tiny_dims(), variant, &mut rng);
    // Larger than the default init so every parameter has a visible effect.
    for (_, t) in model.params.named_mut() {
        for x in t.data_mut() {
            *x *= 2.0;
        }
    }
    model
}

pub fn l1_of(model: &Stgncde, params: &ModelParams<Tensor>, paths: &[ControlPath], target: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let bound = params.map(|t| tape.constant(t.clone()));
    let out = model.forward(&mut tape, &bound, paths, &rk4()).unwrap();
    let y = tape.constant(target.clone());
    let loss = l1_loss(&mut tape, out, y).unwrap();
    tape.value(loss).data()[0]
}

pub fn analytic_grads(model: &Stgncde, paths: &[ControlPath], target: &Tensor) -> ModelParams<Tensor> {
    let mut tape = Tape::new();
    let bound: ModelParams<Var> = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, paths, &rk4()).unwrap();
    let y = tape.constant(target.clone());
    let loss = l1_loss(&mut tape, out, y).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    bound.gradients(&mut grads)
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares every parameter gradient with a central difference. Returns the
/// number of entries checked and the entries outside tolerance.
pub fn finite_difference_check(
    model: &Stgncde,
    paths: &[ControlPath],
    target: &Tensor,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> (usize, Vec<GradMismatch>) {
    let grads = analytic_grads(model, paths, target);
    let grads = grads.named();
    let mut checked = 0;
    let mut bad = Vec::new();
    let names: Vec<(String, usize)> = model.params.named().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    for (p, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let shifted = |delta: f64| {
                let mut params = model.params.clone();
                params.named_mut()[p].1.data_mut()[i] += delta;
                l1_of(model, &params, paths, target)
            };
            let numeric = (shifted(step) - shifted(-step)) / (2.0 * step);
            let analytic = grads[p].1.data()[i];
            checked += 1;
            let err = (analytic - numeric).abs();
            if err > (rel_tol * analytic.abs().max(numeric.abs())).max(abs_floor) {
                bad.push(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}

use stgncde::spline::{fit_natural_cubic, ChannelPath, SplineCoeffs};

/// Worst-case deviations of one spline from its defining properties.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplineReport {
    pub interpolation: f64,
    pub jump_value: f64,
    pub jump_slope: f64,
    pub jump_curvature: f64,
    pub boundary_curvature: f64,
    pub derivative_vs_fd: f64,
}

impl SplineReport {
    pub fn merge(&mut self, other: SplineReport) {
        self.interpolation = self.interpolation.max(other.interpolation);
        self.jump_value = self.jump_value.max(other.jump_value);
        self.jump_slope = self.jump_slope.max(other.jump_slope);
        self.jump_curvature = self.jump_curvature.max(other.jump_curvature);
        self.boundary_curvature = self.boundary_curvature.max(other.boundary_curvature);
        self.derivative_vs_fd = self.derivative_vs_fd.max(other.derivative_vs_fd);
    }

    pub fn continuity(&self) -> f64 {
        self.jump_value.max(self.jump_slope).max(self.jump_curvature)
    }
}

pub fn check_spline(s: &SplineCoeffs, times: &[f64], values: &[f64], probes: &[f64]) -> SplineReport {
    let mut r = SplineReport::default();
    for (t, v) in times.iter().zip(values) {
        r.interpolation = r.interpolation.max((s.eval(*t) - v).abs());
    }
    for i in 0..s.segments() - 1 {
        let (v, d1, d2) = s.segment_end(i);
        let t = s.knots()[i + 1];
        r.jump_value = r.jump_value.max((v - s.eval(t)).abs());
        r.jump_slope = r.jump_slope.max((d1 - s.eval_derivative(t)).abs());
        r.jump_curvature = r.jump_curvature.max((d2 - s.eval_second_derivative(t)).abs());
    }
    let first = s.knots()[0];
    let (_, _, end_curv) = s.segment_end(s.segments() - 1);
    r.boundary_curvature = s.eval_second_derivative(first).abs().max(end_curv.abs());
    let h = 1e-5;
    for &t in probes {
        let fd = (s.eval(t + h) - s.eval(t - h)) / (2.0 * h);
        r.derivative_vs_fd = r.derivative_vs_fd.max((fd - s.eval_derivative(t)).abs());
    }
    r
}

/// Builds the control path of a random `nodes×12×1` window with a random
/// mask and checks every fitted channel.
pub fn spline_suite_window(rng: &mut ChaCha8Rng, nodes: usize, probes_per_spline: usize) -> SplineReport {
    let len = 12;
    let window = Tensor::from_fn(&[nodes, len, 1], |_| rng.gen_range(-3.0..3.0));
    let mask: Vec<bool> = (0..nodes * len).map(|_| rng.gen_bool(0.8)).collect();
    let path = ControlPath::build(&window, &mask, &[0.0]);
    let mut report = SplineReport::default();
    for v in 0..nodes {
        let observed: Vec<usize> = (0..len).filter(|&i| mask[v * len + i]).collect();
        let times: Vec<f64> = observed.iter().map(|&i| i as f64).collect();
        let values: Vec<f64> = observed.iter().map(|&i| window.data()[v * len + i]).collect();
        match path.channel(v, 0) {
            ChannelPath::Spline(s) => {
                let probes: Vec<f64> = (0..probes_per_spline).map(|_| rng.gen_range(0.0..11.0)).collect();
                report.merge(check_spline(s, &times, &values, &probes));
                // Same knots refitted directly must agree exactly.
                assert_eq!(&fit_natural_cubic(&times, &values).unwrap(), s);
            }
            ChannelPath::Constant(c) => {
                let expected = values.first().copied().unwrap_or(0.0);
                assert!(observed.len() < 2 && *c == expected);
            }
        }
    }
    report
}

use stgncde::model::normalized_adaptive_adjacency;
use stgncde::solver::{integrate_fixed, SolverError};

/// Absolute error at t=1 of `dz/dt = z`, `z(0) = 1`.
pub fn exp_error(method: Method, steps: usize) -> f64 {
    let mut tape = Tape::new();
    let z0 = tape.constant(Tensor::scalar(1.0));
    let out = integrate_fixed::<_, SolverError>(&mut tape, |_, _, s| Ok(vec![s[0]]), &[z0], 0.0, 1.0, steps, method)
        .unwrap();
    (tape.value(out[0]).data()[0] - 1f64.exp()).abs()
}

/// Error ratios when going from 8 to 16 steps: (Euler, RK4).
pub fn order_ratios() -> (f64, f64) {
    let ratio = |m| exp_error(m, 8) / exp_error(m, 16);
    (ratio(Method::Euler), ratio(Method::Rk4))
}

/// Euler with unit steps against the hand-written residual recurrence
/// `s ← s + f(k, s)` for a random nonlinear field. True when bitwise equal.
pub fn euler_matches_residual(seed: u64, width: usize, steps: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(&[width, width], (0..width * width).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let s0 = Tensor::new(&[1, width], (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let field = |tape: &mut Tape, t: f64, s: Var| {
        let wv = tape.constant(w.clone());
        let lin = tape.matmul(s, wv).unwrap();
        let shifted = tape.affine(lin, 1.0, t);
        tape.tanh(shifted)
    };

    let mut tape = Tape::new();
    let start = tape.constant(s0.clone());
    let solved = integrate_fixed::<_, SolverError>(
        &mut tape,
        |tape, t, s| Ok(vec![field(tape, t, s[0])]),
        &[start],
        0.0,
        steps as f64,
        steps,
        Method::Euler,
    )
    .unwrap();
    let solved = tape.value(solved[0]).clone();

    let mut tape = Tape::new();
    let mut s = tape.constant(s0);
    for k in 0..steps {
        let f = field(&mut tape, k as f64, s);
        s = tape.add(s, f).unwrap();
    }
    let manual = tape.value(s);
    solved.data().iter().zip(manual.data()).all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Largest deviation of a row sum of the normalized adjacency from 2.
pub fn adjacency_row_sum_error(embedding: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let e = tape.constant(embedding.clone());
    let a = normalized_adaptive_adjacency(&mut tape, e).unwrap();
    let a = tape.value(a).clone();
    let n = embedding.shape()[0];
    a.data().chunks(n).map(|row| (row.iter().sum::<f64>() - 2.0).abs()).fold(0.0, f64::max)
}

/// True when `E = 0` gives exactly `1 + 1/n` on the diagonal and `1/n`
/// elsewhere.
pub fn zero_embedding_is_uniform(n: usize, dim: usize) -> bool {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::zeros(&[n, dim]));
    let a = normalized_adaptive_adjacency(&mut tape, e).unwrap();
    let a = tape.value(a).clone();
    let u = 1.0 / n as f64;
    (0..n).all(|i| (0..n).all(|j| a.data()[i * n + j] == if i == j { 1.0 + u } else { u }))
}

/// Max |Δ prediction| between 1→2 and 2→4 steps per unit on the tiny model.
pub fn step_refinement_deltas(seed: u64) -> (f64, f64) {
    let model = tiny_model(Variant::Full, seed);
    let (paths, _) = random_batch(&model.dims, 2, seed + 1);
    let predict = |spu| {
        let cfg = SolverConfig {
            method: Method::Rk4,
            steps_per_unit: spu,
        };
        model.predict(&paths, &cfg).unwrap()
    };
    let (p1, p2, p4) = (predict(1), predict(2), predict(4));
    let max_diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    (max_diff(&p1, &p2), max_diff(&p2, &p4))
}

/// Gradients of `ΣH(T)` for the full model. Returns the largest magnitude
/// over the spatial and `Z(0)` parameters and whether `H(0)` got any signal.
pub fn temporal_state_spatial_grads(seed: u64) -> (f64, bool) {
    use stgncde::model::integrate_state;
    let model = tiny_model(Variant::Full, seed);
    let (paths, _) = random_batch(&model.dims, 3, seed + 6);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let end = integrate_state(&mut tape, &bound, Variant::Full, &paths, &rk4()).unwrap();
    let loss = tape.sum(end.h.unwrap());
    let mut grads = tape.backward(loss).unwrap();
    let g = bound.gradients(&mut grads);
    let max_abs = |t: &Tensor| t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let spatial = g.spatial.as_ref().unwrap();
    let z0 = g.z0.as_ref().unwrap();
    let worst = [
        &spatial.input.weight,
        &spatial.input.bias,
        &spatial.out.weight,
        &spatial.out.bias,
        &spatial.embedding,
        &spatial.w_spatial,
        &z0.weight,
        &z0.bias,
    ]
    .into_iter()
    .map(max_abs)
    .fold(0.0, f64::max);
    (worst, max_abs(&g.h0.weight) > 0.0)
}
