//! Spatio-temporal graph CDE network and its two ablations.
//!
//! Parameters are generic over their storage: `ModelParams<Tensor>` holds the
//! values, `ModelParams<Var>` the same layout bound to a tape for one
//! forward/backward pass.
//!
//! Every CDE function returns one matrix per node, flattened row-major into a
//! single row: `f(H)` gives `dim_h×D` per node (applied to `dX/dt`), `g(Z)`
//! gives `dim_z×dim_h` per node (applied to `dH/dt`), and the spatial-only
//! `g̃(Z)` gives `dim_z×D` per node (applied to `dX/dt`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, Tensor, TensorError, Var};
use crate::solver::{self, SolverConfig, SolverError};
use crate::spline::{stack_derivative, stack_eval, ControlPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("vector field evaluated at t = {t}, outside [0, {end}]")]
    Domain { t: f64, end: f64 },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("batch of paths does not match the model: {0}")]
    Input(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    #[serde(alias = "temporal")]
    TemporalOnly,
    #[serde(alias = "spatial")]
    SpatialOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::TemporalOnly, Variant::SpatialOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TemporalOnly => "temporal_only",
            Variant::SpatialOnly => "spatial_only",
        }
    }

    fn has_temporal(self) -> bool {
        self != Variant::SpatialOnly
    }

    fn has_spatial(self) -> bool {
        self != Variant::TemporalOnly
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "temporal" | "temporal_only" => Ok(Variant::TemporalOnly),
            "spatial" | "spatial_only" => Ok(Variant::SpatialOnly),
            other => Err(format!(
                "unknown variant {other:?} (expected full, temporal_only, spatial_only)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_nodes: usize,
    /// D
    pub input_dim: usize,
    /// M
    pub output_dim: usize,
    /// S
    pub horizon: usize,
    pub dim_h: usize,
    pub dim_z: usize,
    /// K
    pub k_layers: usize,
    /// C
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in×out`
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalField<T> {
    /// `K + 1` ReLU layers producing `A_0 … A_K`.
    pub hidden: Vec<Linear<T>>,
    /// tanh layer `dim_h → dim_h·D`.
    pub out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField<T> {
    pub input: Linear<T>,
    /// `dim_z → dim_z·dim_h`, or `dim_z → dim_z·D` for the spatial-only model.
    pub out: Linear<T>,
    /// `|V|×C`
    pub embedding: T,
    /// `dim_z×dim_z`
    pub w_spatial: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub temporal: Option<TemporalField<T>>,
    pub spatial: Option<SpatialField<T>>,
    pub h0: Linear<T>,
    pub z0: Option<Linear<T>>,
    pub w_output: T,
    pub b_output: T,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> ModelParams<T> {
    /// Transforms every parameter, visiting them in [`ModelParams::named`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        let temporal = self.temporal.as_ref().map(|t| TemporalField {
            hidden: t.hidden.iter().map(|l| l.map(&mut f)).collect(),
            out: t.out.map(&mut f),
        });
        let spatial = self.spatial.as_ref().map(|s| SpatialField {
            input: s.input.map(&mut f),
            out: s.out.map(&mut f),
            embedding: f(&s.embedding),
            w_spatial: f(&s.w_spatial),
        });
        let h0 = self.h0.map(&mut f);
        let z0 = self.z0.as_ref().map(|l| l.map(&mut f));
        ModelParams {
            temporal,
            spatial,
            h0,
            z0,
            w_output: f(&self.w_output),
            b_output: f(&self.b_output),
        }
    }

    /// Parameters with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        if let Some(t) = &self.temporal {
            for (i, l) in t.hidden.iter().enumerate() {
                l.visit(&format!("f.hidden{i}"), &mut out);
            }
            t.out.visit("f.out", &mut out);
        }
        if let Some(s) = &self.spatial {
            s.input.visit("g.input", &mut out);
            s.out.visit("g.out", &mut out);
            out.push(("g.embedding".into(), &s.embedding));
            out.push(("g.w_spatial".into(), &s.w_spatial));
        }
        self.h0.visit("h0", &mut out);
        if let Some(z0) = &self.z0 {
            z0.visit("z0", &mut out);
        }
        out.push(("output.weight".into(), &self.w_output));
        out.push(("output.bias".into(), &self.b_output));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.temporal {
            for (i, l) in t.hidden.iter_mut().enumerate() {
                l.visit_mut(&format!("f.hidden{i}"), &mut out);
            }
            t.out.visit_mut("f.out", &mut out);
        }
        if let Some(s) = &mut self.spatial {
            s.input.visit_mut("g.input", &mut out);
            s.out.visit_mut("g.out", &mut out);
            out.push(("g.embedding".into(), &mut s.embedding));
            out.push(("g.w_spatial".into(), &mut s.w_spatial));
        }
        self.h0.visit_mut("h0", &mut out);
        if let Some(z0) = &mut self.z0 {
            z0.visit_mut("z0", &mut out);
        }
        out.push(("output.weight".into(), &mut self.w_output));
        out.push(("output.bias".into(), &mut self.b_output));
        out
    }
}

impl ModelParams<Tensor> {
    /// Fresh parameters: FC weights and biases ~ U(±1/√fan_in), the node
    /// embedding ~ 0.1·U(−1, 1).
    pub fn init(dims: &ModelDims, variant: Variant, rng: &mut ChaCha8Rng) -> Self {
        let (dh, dz, d) = (dims.dim_h, dims.dim_z, dims.input_dim);
        let temporal = variant.has_temporal().then(|| TemporalField {
            hidden: (0..=dims.k_layers).map(|_| linear(rng, dh, dh)).collect(),
            out: linear(rng, dh, dh * d),
        });
        let spatial = variant.has_spatial().then(|| {
            let out_cols = if variant == Variant::SpatialOnly { dz * d } else { dz * dh };
            SpatialField {
                input: linear(rng, dz, dz),
                out: linear(rng, dz, out_cols),
                embedding: uniform(rng, &[dims.num_nodes, dims.embed_dim], 0.1),
                w_spatial: uniform(rng, &[dz, dz], 1.0 / (dz as f64).sqrt()),
            }
        });
        let h0 = linear(rng, d, dh);
        let z0 = variant.has_spatial().then(|| linear(rng, dh, dz));
        let readout = if variant == Variant::TemporalOnly { dh } else { dz };
        let out_cols = dims.horizon * dims.output_dim;
        let bound = 1.0 / (readout as f64).sqrt();
        ModelParams {
            temporal,
            spatial,
            h0,
            z0,
            w_output: uniform(rng, &[readout, out_cols], bound),
            b_output: uniform(rng, &[out_cols], bound),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    /// Checks that `other` has exactly this layout.
    pub fn check_layout(&self, other: &ModelParams<Tensor>) -> Result<(), ModelError> {
        let (a, b) = (self.named(), other.named());
        if a.len() != b.len() {
            return Err(ModelError::Input(format!(
                "expected {} parameter tensors, found {}",
                a.len(),
                b.len()
            )));
        }
        for ((name, x), (other_name, y)) in a.iter().zip(&b) {
            if name != other_name || x.shape() != y.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: x.shape().to_vec(),
                    found: y.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

impl ModelParams<Var> {
    /// Collects the gradient of every bound parameter.
    pub fn gradients(&self, grads: &mut Gradients) -> ModelParams<Tensor> {
        self.map(|v| grads.take(*v).expect("bound parameters are trainable leaves"))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Linear {
        weight: uniform(rng, &[fan_in, fan_out], bound),
        bias: uniform(rng, &[fan_out], bound),
    }
}

impl Linear<Var> {
    /// Shared affine map applied to every row of `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// `f(H)`: each row of `H` goes through `K + 1` ReLU layers and a final tanh
/// layer; rows never mix. Returns `R × (dim_h·D)`.
pub fn temporal_cde_func(
    tape: &mut Tape,
    h: Var,
    field: &TemporalField<Var>,
) -> Result<Var, TensorError> {
    let mut a = h;
    for layer in &field.hidden {
        let pre = layer.forward(tape, a)?;
        a = tape.relu(pre);
    }
    let out = field.out.forward(tape, a)?;
    Ok(tape.tanh(out))
}

/// `I + softmax_rows(relu(E·Eᵀ))`.
pub fn normalized_adaptive_adjacency(tape: &mut Tape, embedding: Var) -> Result<Var, TensorError> {
    let et = tape.transpose(embedding)?;
    let scores = tape.matmul(embedding, et)?;
    let rectified = tape.relu(scores);
    let normalized = tape.softmax_rows(rectified)?;
    let n = tape.value(embedding).shape()[0];
    let eye = tape.constant(Tensor::eye(n));
    tape.add(eye, normalized)
}

/// `g(Z)`: `B0 = relu(FC(Z))`, `B1 = adjacency·B0·W_spatial` (per graph in
/// the batch), output `tanh(FC_out(B1))`. The adjacency is passed in so it
/// is built once per forward pass.
pub fn spatial_cde_func(
    tape: &mut Tape,
    z: Var,
    field: &SpatialField<Var>,
    adjacency: Var,
) -> Result<Var, TensorError> {
    let pre = field.input.forward(tape, z)?;
    let b0 = tape.relu(pre);
    let mixed = tape.block_mix(adjacency, b0)?;
    let b1 = tape.matmul(mixed, field.w_spatial)?;
    let out = field.out.forward(tape, b1)?;
    Ok(tape.tanh(out))
}

/// Hidden state of the augmented system. The temporal-only model carries no
/// `Z`; the spatial-only model drops `H` after building `Z(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentedState {
    pub h: Option<Var>,
    pub z: Option<Var>,
}

impl AugmentedState {
    fn to_vars(self, variant: Variant) -> Vec<Var> {
        match variant {
            Variant::Full => vec![self.h.unwrap(), self.z.unwrap()],
            Variant::TemporalOnly => vec![self.h.unwrap()],
            Variant::SpatialOnly => vec![self.z.unwrap()],
        }
    }

    fn from_vars(vars: &[Var], variant: Variant) -> Self {
        match variant {
            Variant::Full => Self {
                h: Some(vars[0]),
                z: Some(vars[1]),
            },
            Variant::TemporalOnly => Self {
                h: Some(vars[0]),
                z: None,
            },
            Variant::SpatialOnly => Self {
                h: None,
                z: Some(vars[0]),
            },
        }
    }
}

/// `H(0) = FC(X(0))`, `Z(0) = FC(H(0))`.
pub fn initial_values(
    tape: &mut Tape,
    x0: Var,
    params: &ModelParams<Var>,
) -> Result<AugmentedState, TensorError> {
    let h = params.h0.forward(tape, x0)?;
    let z = match &params.z0 {
        Some(z0) => Some(z0.forward(tape, h)?),
        None => None,
    };
    Ok(AugmentedState { h: Some(h), z })
}

/// Everything the vector field needs besides `(t, state)`.
pub struct FieldContext<'a> {
    pub params: &'a ModelParams<Var>,
    pub variant: Variant,
    pub paths: &'a [ControlPath],
    /// Mixing matrix for `g`; `None` for the temporal-only model.
    pub adjacency: Option<Var>,
    pub t_end: f64,
}

impl FieldContext<'_> {
    pub fn new<'a>(
        tape: &mut Tape,
        params: &'a ModelParams<Var>,
        variant: Variant,
        paths: &'a [ControlPath],
    ) -> Result<FieldContext<'a>, ModelError> {
        let first = paths
            .first()
            .ok_or_else(|| ModelError::Input("empty batch".into()))?;
        let adjacency = match &params.spatial {
            Some(s) => Some(normalized_adaptive_adjacency(tape, s.embedding)?),
            None => None,
        };
        Ok(FieldContext {
            params,
            variant,
            paths,
            adjacency,
            t_end: first.horizon(),
        })
    }

    /// Right-hand side of the augmented system at time `t`.
    pub fn vector_field(
        &self,
        tape: &mut Tape,
        t: f64,
        state: &AugmentedState,
    ) -> Result<AugmentedState, ModelError> {
        const SLACK: f64 = 1e-9;
        if !(t >= -SLACK && t <= self.t_end + SLACK) {
            return Err(ModelError::Domain { t, end: self.t_end });
        }
        let dxdt = tape.constant(stack_derivative(self.paths, t));
        match self.variant {
            Variant::Full | Variant::TemporalOnly => {
                let f = self.params.temporal.as_ref().expect("temporal params");
                let h = state.h.expect("H state");
                let fh = temporal_cde_func(tape, h, f)?;
                let dh = tape.row_matvec(fh, dxdt)?;
                if self.variant == Variant::TemporalOnly {
                    return Ok(AugmentedState {
                        h: Some(dh),
                        z: None,
                    });
                }
                let dz = self.spatial_term(tape, state, dh)?;
                Ok(AugmentedState {
                    h: Some(dh),
                    z: Some(dz),
                })
            }
            Variant::SpatialOnly => {
                let dz = self.spatial_term(tape, state, dxdt)?;
                Ok(AugmentedState { h: None, z: Some(dz) })
            }
        }
    }

    fn spatial_term(
        &self,
        tape: &mut Tape,
        state: &AugmentedState,
        control: Var,
    ) -> Result<Var, ModelError> {
        let g = self.params.spatial.as_ref().expect("spatial params");
        let z = state.z.expect("Z state");
        let gz = spatial_cde_func(tape, z, g, self.adjacency.expect("adjacency"))?;
        Ok(tape.row_matvec(gz, control)?)
    }
}

/// `ŷ = z(T)·W_output + b_output` per node.
pub fn output_layer(tape: &mut Tape, state_t: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let zw = tape.matmul(state_t, w)?;
    tape.add_bias(zw, b)
}

/// Integrates the augmented system over a batch of control paths and returns
/// the final state.
pub fn integrate_state(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    variant: Variant,
    paths: &[ControlPath],
    solver_cfg: &SolverConfig,
) -> Result<AugmentedState, ModelError> {
    let ctx = FieldContext::new(tape, params, variant, paths)?;
    let x0 = tape.constant(stack_eval(paths, 0.0));
    let init = initial_values(tape, x0, params)?;
    let end = solver::integrate(
        tape,
        |tape, t, vars| {
            let state = AugmentedState::from_vars(vars, variant);
            Ok::<_, ModelError>(ctx.vector_field(tape, t, &state)?.to_vars(variant))
        },
        &init.to_vars(variant),
        ctx.t_end,
        solver_cfg,
    )?;
    Ok(AugmentedState::from_vars(&end, variant))
}

/// The model: dimensions, variant and parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Stgncde {
    pub dims: ModelDims,
    pub variant: Variant,
    pub params: ModelParams<Tensor>,
}

impl Stgncde {
    pub fn new(dims: ModelDims, variant: Variant, rng: &mut ChaCha8Rng) -> Self {
        let params = ModelParams::init(&dims, variant, rng);
        Self {
            dims,
            variant,
            params,
        }
    }

    /// Records a forward pass for a batch of windows. Output is
    /// `B×|V|×S×M` in the normalized units of the inputs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &ModelParams<Var>,
        paths: &[ControlPath],
        solver_cfg: &SolverConfig,
    ) -> Result<Var, ModelError> {
        for p in paths {
            if p.num_nodes() != self.dims.num_nodes || p.num_features() != self.dims.input_dim {
                return Err(ModelError::Input(format!(
                    "path is {}×{}, model expects {}×{}",
                    p.num_nodes(),
                    p.num_features(),
                    self.dims.num_nodes,
                    self.dims.input_dim
                )));
            }
        }
        let end = integrate_state(tape, bound, self.variant, paths, solver_cfg)?;
        let readout = match self.variant {
            Variant::TemporalOnly => end.h.expect("H state"),
            _ => end.z.expect("Z state"),
        };
        let flat = output_layer(tape, readout, bound.w_output, bound.b_output)?;
        Ok(tape.reshape(
            flat,
            &[
                paths.len(),
                self.dims.num_nodes,
                self.dims.horizon,
                self.dims.output_dim,
            ],
        )?)
    }

    /// Forward pass without keeping gradients around.
    pub fn predict(&self, paths: &[ControlPath], solver_cfg: &SolverConfig) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.map(|t| tape.constant(t.clone()));
        let out = self.forward(&mut tape, &bound, paths, solver_cfg)?;
        Ok(tape.value(out).clone())
    }
}
