//! Forward and backward passes for every architecture in the comparison.
//!
//! A [`Model`] is an ordered list of [`Stage`]s built from an [`ArchSpec`].
//! All stages map `batch × d_in → batch × d_out` without mixing rows.
//! Learnable scalars are visited in a fixed order ([`Model::param_slices`]),
//! which defines the flat layout optimizers work on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bspline::{basis_local, basis_local_with_grad, make_knots, KnotVector, SplineCoefs, SplineSpec};
use crate::error::{Error, Result};
use crate::nn::{layernorm, layernorm_backward, ActivationKind, LayerNormCache, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Kan,
    Mlp,
    MlpSplinePre,
    MlpSplinePost,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Kan => "kan",
            ArchKind::Mlp => "mlp",
            ArchKind::MlpSplinePre => "mlp_spline_pre",
            ArchKind::MlpSplinePost => "mlp_spline_post",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "kan" => Ok(ArchKind::Kan),
            "mlp" => Ok(ArchKind::Mlp),
            "mlp_spline_pre" => Ok(ArchKind::MlpSplinePre),
            "mlp_spline_post" => Ok(ArchKind::MlpSplinePost),
            other => Err(Error::Config(format!("unknown architecture kind '{other}'"))),
        }
    }
}

fn default_activation() -> ActivationKind {
    ActivationKind::Relu
}

/// Declarative model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default)]
    pub use_norm: bool,
    #[serde(default)]
    pub spline: Option<SplineSpec>,
    #[serde(default)]
    pub nonlinear_first: bool,
}

impl ArchSpec {
    pub fn mlp(widths: &[usize], activation: ActivationKind) -> Self {
        ArchSpec {
            kind: ArchKind::Mlp,
            widths: widths.to_vec(),
            activation,
            use_norm: false,
            spline: None,
            nonlinear_first: false,
        }
    }

    pub fn kan(widths: &[usize], spline: SplineSpec) -> Self {
        ArchSpec {
            kind: ArchKind::Kan,
            widths: widths.to_vec(),
            activation: ActivationKind::Silu,
            use_norm: false,
            spline: Some(spline),
            nonlinear_first: false,
        }
    }

    pub fn spline_mlp(kind: ArchKind, widths: &[usize], spline: SplineSpec) -> Self {
        ArchSpec {
            kind,
            widths: widths.to_vec(),
            activation: ActivationKind::Relu,
            use_norm: false,
            spline: Some(spline),
            nonlinear_first: false,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "at least two widths (input and output) are required, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("widths must be positive, got {:?}", self.widths)));
        }
        match (self.kind, &self.spline) {
            (ArchKind::Mlp, _) => {}
            (_, None) => return Err(Error::Config(format!("{} requires a spline block", self.kind))),
            (_, Some(s)) => s.validate()?,
        }
        if self.kind == ArchKind::Kan && self.use_norm {
            return Err(Error::Config("normalization is not supported inside KAN models".into()));
        }
        Ok(())
    }

    /// The spline spec, for kinds that require one.
    pub fn spline_spec(&self) -> Result<&SplineSpec> {
        self.spline
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no spline block", self.kind)))
    }
}

/// Which side of the linear map a learnable spline activation sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplinePlacement {
    /// `y = W · spline(x) + b`, one spline per input coordinate.
    Pre,
    /// `y = spline(W · x + b)`, one spline per output coordinate.
    Post,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanLayerParams {
    pub coef: SplineCoefs,
    pub w_spline: Matrix,
    pub w_shortcut: Matrix,
    pub bias: Vec<f64>,
}

impl KanLayerParams {
    pub fn zeros(d_in: usize, d_out: usize, num_basis: usize) -> Self {
        KanLayerParams {
            coef: SplineCoefs::zeros(d_out, d_in, num_basis),
            w_spline: Matrix::zeros(d_out, d_in),
            w_shortcut: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.coef.d_in
    }

    pub fn d_out(&self) -> usize {
        self.coef.d_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl MlpLayerParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        MlpLayerParams {
            weight: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplineMlpLayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// `n_act × (G + K)`, one row per activation position.
    pub act_coef: Matrix,
    pub placement: SplinePlacement,
}

impl SplineMlpLayerParams {
    pub fn zeros(d_in: usize, d_out: usize, num_basis: usize, placement: SplinePlacement) -> Self {
        let n_act = match placement {
            SplinePlacement::Pre => d_in,
            SplinePlacement::Post => d_out,
        };
        SplineMlpLayerParams {
            weight: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
            act_coef: Matrix::zeros(n_act, num_basis),
            placement,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Kan(KanLayerParams),
    /// Affine map, optionally preceded by a fixed activation (nonlinear-first layers).
    Linear {
        params: MlpLayerParams,
        pre_activation: Option<ActivationKind>,
    },
    Activation(ActivationKind),
    Norm(NormParams),
    SplineMlp(SplineMlpLayerParams),
}

impl Stage {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            Stage::Kan(p) => vec![&p.coef.data, p.w_spline.as_slice(), p.w_shortcut.as_slice(), &p.bias],
            Stage::Linear { params, .. } => vec![params.weight.as_slice(), &params.bias],
            Stage::Activation(_) => vec![],
            Stage::Norm(p) => vec![&p.gain, &p.bias],
            Stage::SplineMlp(p) => vec![p.weight.as_slice(), &p.bias, p.act_coef.as_slice()],
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Stage::Kan(p) => vec![
                &mut p.coef.data,
                p.w_spline.as_mut_slice(),
                p.w_shortcut.as_mut_slice(),
                &mut p.bias,
            ],
            Stage::Linear { params, .. } => vec![params.weight.as_mut_slice(), &mut params.bias],
            Stage::Activation(_) => vec![],
            Stage::Norm(p) => vec![&mut p.gain, &mut p.bias],
            Stage::SplineMlp(p) => vec![p.weight.as_mut_slice(), &mut p.bias, p.act_coef.as_mut_slice()],
        }
    }

    fn zeros_like(&self) -> Stage {
        let mut s = self.clone();
        for t in s.param_slices_mut() {
            t.fill(0.0);
        }
        s
    }

    fn output_dim(&self, d_in: usize) -> usize {
        match self {
            Stage::Kan(p) => p.d_out(),
            Stage::Linear { params, .. } => params.d_out(),
            Stage::SplineMlp(p) => p.d_out(),
            Stage::Activation(_) | Stage::Norm(_) => d_in,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    knots: Option<KnotVector>,
    stages: Vec<Stage>,
}

/// Stage inputs (and normalization statistics) saved by [`Model::forward_cached`].
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    norms: Vec<Option<LayerNormCache>>,
}

/// Parameters from the fixed initialization law, deterministic in `rng`.
///
/// Linear and shortcut weights are `U(−√(1/d_in), √(1/d_in))`, spline
/// coefficients `N(0, 0.1)`, spline weights 1, biases 0, norm gains 1.
pub fn build_model(arch: &ArchSpec, rng: &mut Rng) -> Result<Model> {
    let mut model = Model::zeros(arch)?;
    for stage in &mut model.stages {
        match stage {
            Stage::Kan(p) => {
                let bound = (1.0 / p.d_in() as f64).sqrt();
                p.coef.data.iter_mut().for_each(|c| *c = rng.normal(0.0, 0.1));
                p.w_spline.as_mut_slice().fill(1.0);
                p.w_shortcut
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|w| *w = rng.uniform(-bound, bound));
            }
            Stage::Linear { params, .. } => {
                let bound = (1.0 / params.d_in() as f64).sqrt();
                params
                    .weight
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|w| *w = rng.uniform(-bound, bound));
            }
            Stage::SplineMlp(p) => {
                let bound = (1.0 / p.d_in() as f64).sqrt();
                p.weight
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|w| *w = rng.uniform(-bound, bound));
                p.act_coef
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|c| *c = rng.normal(0.0, 0.1));
            }
            Stage::Norm(_) | Stage::Activation(_) => {}
        }
    }
    Ok(model)
}

impl Model {
    /// Model with the stage structure of `arch`, all weights zero and norm gains one.
    pub fn zeros(arch: &ArchSpec) -> Result<Model> {
        arch.validate()?;
        let knots = arch
            .spline
            .as_ref()
            .filter(|_| arch.kind != ArchKind::Mlp)
            .map(make_knots);
        let nb = knots.as_ref().map_or(0, |k| k.num_basis());
        let layers = arch.num_layers();
        let mut stages = Vec::new();
        for l in 0..layers {
            let (d_in, d_out) = (arch.widths[l], arch.widths[l + 1]);
            let hidden = l + 1 < layers;
            let norm = || {
                Stage::Norm(NormParams {
                    gain: vec![1.0; d_out],
                    bias: vec![0.0; d_out],
                })
            };
            match arch.kind {
                ArchKind::Kan => stages.push(Stage::Kan(KanLayerParams::zeros(d_in, d_out, nb))),
                ArchKind::Mlp => {
                    let pre_activation = (arch.nonlinear_first && l > 0).then_some(arch.activation);
                    stages.push(Stage::Linear {
                        params: MlpLayerParams::zeros(d_in, d_out),
                        pre_activation,
                    });
                    if hidden && arch.use_norm {
                        stages.push(norm());
                    }
                    if hidden && !arch.nonlinear_first {
                        stages.push(Stage::Activation(arch.activation));
                    }
                }
                ArchKind::MlpSplinePre => {
                    stages.push(Stage::SplineMlp(SplineMlpLayerParams::zeros(
                        d_in,
                        d_out,
                        nb,
                        SplinePlacement::Pre,
                    )));
                    if hidden && arch.use_norm {
                        stages.push(norm());
                    }
                }
                ArchKind::MlpSplinePost => {
                    if hidden {
                        stages.push(Stage::SplineMlp(SplineMlpLayerParams::zeros(
                            d_in,
                            d_out,
                            nb,
                            SplinePlacement::Post,
                        )));
                        if arch.use_norm {
                            stages.push(norm());
                        }
                    } else {
                        stages.push(Stage::Linear {
                            params: MlpLayerParams::zeros(d_in, d_out),
                            pre_activation: None,
                        });
                    }
                }
            }
        }
        Ok(Model {
            arch: arch.clone(),
            knots,
            stages,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn knots(&self) -> Option<&KnotVector> {
        self.knots.as_ref()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.stages.iter().flat_map(Stage::param_slices).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.stages.iter_mut().flat_map(Stage::param_slices_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in self.param_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape("Model::load_flat", n, flat.len()));
        }
        let mut off = 0;
        for s in self.param_slices_mut() {
            let len = s.len();
            s.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Model {
        Model {
            arch: self.arch.clone(),
            knots: self.knots.clone(),
            stages: self.stages.iter().map(Stage::zeros_like).collect(),
        }
    }

    fn knots_for(&self, op: &'static str) -> Result<&KnotVector> {
        self.knots
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{op}: model has no spline grid")))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for stage in &self.stages {
            x = self.stage_forward(stage, &x)?.0;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut norms = Vec::with_capacity(self.stages.len());
        let mut x = batch.clone();
        for stage in &self.stages {
            let (y, norm) = self.stage_forward(stage, &x)?;
            inputs.push(x);
            norms.push(norm);
            x = y;
        }
        Ok((x, ForwardCache { inputs, norms }))
    }

    /// Gradients of `Σ upstream ⊙ output` with respect to every parameter
    /// (returned in a model of the same shape) and to the input batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(Model, Matrix)> {
        let mut grads = self.zeros_like();
        let mut g = upstream.clone();
        for (idx, stage) in self.stages.iter().enumerate().rev() {
            let x = &cache.inputs[idx];
            g = match stage {
                Stage::Kan(p) => {
                    let (gp, gx) = kan_layer_backward(p, self.knots_for("kan_layer_backward")?, x, &g)?;
                    grads.stages[idx] = Stage::Kan(gp);
                    gx
                }
                Stage::Linear { params, pre_activation } => {
                    let (gp, gx) = mlp_layer_backward(params, *pre_activation, x, &g)?;
                    if let Stage::Linear { params, .. } = &mut grads.stages[idx] {
                        *params = gp;
                    }
                    gx
                }
                Stage::Activation(kind) => {
                    let mut gx = g.clone();
                    for (o, &xv) in gx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *o *= kind.grad(xv);
                    }
                    gx
                }
                Stage::Norm(p) => {
                    let nc = cache.norms[idx].as_ref().expect("norm cache recorded in forward");
                    let lg = layernorm_backward(nc, &p.gain, &g)?;
                    grads.stages[idx] = Stage::Norm(NormParams {
                        gain: lg.gain,
                        bias: lg.bias,
                    });
                    lg.input
                }
                Stage::SplineMlp(p) => {
                    let (gp, gx) = spline_mlp_layer_backward(p, self.knots_for("spline_mlp_layer_backward")?, x, &g)?;
                    grads.stages[idx] = Stage::SplineMlp(gp);
                    gx
                }
            };
        }
        Ok((grads, g))
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.arch.input_dim() {
            return Err(Error::shape("model_forward", self.arch.input_dim(), batch.cols()));
        }
        Ok(())
    }

    fn stage_forward(&self, stage: &Stage, x: &Matrix) -> Result<(Matrix, Option<LayerNormCache>)> {
        Ok(match stage {
            Stage::Kan(p) => (kan_layer_forward(p, self.knots_for("kan_layer_forward")?, x)?, None),
            Stage::Linear { params, pre_activation } => (mlp_layer_forward(params, *pre_activation, x)?, None),
            Stage::Activation(kind) => (x.map(|v| kind.eval(v)), None),
            Stage::Norm(p) => {
                let (y, c) = layernorm(x, &p.gain, &p.bias)?;
                (y, Some(c))
            }
            Stage::SplineMlp(p) => (
                spline_mlp_layer_forward(p, self.knots_for("spline_mlp_layer_forward")?, x)?,
                None,
            ),
        })
    }

    /// Output width after each stage, starting from the input width.
    pub fn stage_widths(&self) -> Vec<usize> {
        let mut w = vec![self.arch.input_dim()];
        for s in &self.stages {
            w.push(s.output_dim(*w.last().unwrap()));
        }
        w
    }
}

pub fn model_forward(model: &Model, batch: &Matrix) -> Result<Matrix> {
    model.forward(batch)
}

/// Local basis values (and optionally derivatives) for one row of inputs.
struct RowBasis {
    width: usize,
    start: Vec<isize>,
    values: Vec<f64>,
    grads: Vec<f64>,
    active: Vec<bool>,
}

impl RowBasis {
    fn new(d: usize, order: usize) -> Self {
        let width = order + 1;
        RowBasis {
            width,
            start: vec![0; d],
            values: vec![0.0; d * width],
            grads: vec![0.0; d * width],
            active: vec![false; d],
        }
    }

    fn fill(&mut self, knots: &KnotVector, row: &[f64], with_grad: bool) {
        let w = self.width;
        for (i, &x) in row.iter().enumerate() {
            let vals = &mut self.values[i * w..(i + 1) * w];
            let res = if with_grad {
                basis_local_with_grad(knots, x, vals, &mut self.grads[i * w..(i + 1) * w])
            } else {
                basis_local(knots, x, vals)
            };
            match res {
                Some(s) => {
                    self.start[i] = s;
                    self.active[i] = true;
                }
                None => self.active[i] = false,
            }
        }
    }

    /// Valid `(offset into coef, offset into local window, len)` for input `i`.
    #[inline]
    fn window(&self, i: usize, num_basis: usize) -> (usize, usize, usize) {
        let s = self.start[i];
        let lo = (-s).max(0) as usize;
        let hi = ((num_basis as isize - s).min(self.width as isize)).max(0) as usize;
        if lo >= hi {
            return (0, 0, 0);
        }
        ((s + lo as isize) as usize, lo, hi - lo)
    }

    #[inline]
    fn dot(&self, i: usize, coef: &[f64]) -> f64 {
        if !self.active[i] {
            return 0.0;
        }
        let (c0, l0, len) = self.window(i, coef.len());
        let vals = &self.values[i * self.width + l0..i * self.width + l0 + len];
        coef[c0..c0 + len].iter().zip(vals).map(|(c, v)| c * v).sum()
    }

    #[inline]
    fn dot_grad(&self, i: usize, coef: &[f64]) -> f64 {
        if !self.active[i] {
            return 0.0;
        }
        let (c0, l0, len) = self.window(i, coef.len());
        let g = &self.grads[i * self.width + l0..i * self.width + l0 + len];
        coef[c0..c0 + len].iter().zip(g).map(|(c, v)| c * v).sum()
    }

    /// `coef_grad[m] += scale · B_m(x_i)`.
    #[inline]
    fn scatter(&self, i: usize, scale: f64, coef_grad: &mut [f64]) {
        if !self.active[i] {
            return;
        }
        let (c0, l0, len) = self.window(i, coef_grad.len());
        let vals = &self.values[i * self.width + l0..i * self.width + l0 + len];
        for (g, v) in coef_grad[c0..c0 + len].iter_mut().zip(vals) {
            *g += scale * v;
        }
    }
}

fn check_width(op: &'static str, expected: usize, x: &Matrix) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::shape(op, format!("{expected} input columns"), x.cols()));
    }
    Ok(())
}

fn check_upstream(op: &'static str, rows: usize, cols: usize, up: &Matrix) -> Result<()> {
    if up.shape() != (rows, cols) {
        return Err(Error::shape(
            op,
            format!("{rows}x{cols}"),
            format!("{}x{}", up.rows(), up.cols()),
        ));
    }
    Ok(())
}

fn check_basis(op: &'static str, expected: usize, knots: &KnotVector) -> Result<()> {
    if knots.num_basis() != expected {
        return Err(Error::shape(
            op,
            format!("{expected} basis functions"),
            knots.num_basis(),
        ));
    }
    Ok(())
}

/// `y_j = Σ_i [w_spline[j,i] · spline_ji(x_i) + w_shortcut[j,i] · SiLU(x_i)] + bias_j`.
pub fn kan_layer_forward(p: &KanLayerParams, knots: &KnotVector, x: &Matrix) -> Result<Matrix> {
    let (d_in, d_out) = (p.d_in(), p.d_out());
    check_width("kan_layer_forward", d_in, x)?;
    check_basis("kan_layer_forward", p.coef.num_basis, knots)?;
    let mut out = Matrix::zeros(x.rows(), d_out);
    let mut basis = RowBasis::new(d_in, knots.order());
    let mut silu = vec![0.0; d_in];
    for r in 0..x.rows() {
        let row = x.row(r);
        basis.fill(knots, row, false);
        for (s, &v) in silu.iter_mut().zip(row) {
            *s = ActivationKind::Silu.eval(v);
        }
        let orow = out.row_mut(r);
        for j in 0..d_out {
            let ws = p.w_spline.row(j);
            let wb = p.w_shortcut.row(j);
            let mut acc = p.bias[j];
            for i in 0..d_in {
                acc += ws[i] * basis.dot(i, p.coef.edge(j, i)) + wb[i] * silu[i];
            }
            orow[j] = acc;
        }
    }
    Ok(out)
}

/// Gradients of `Σ upstream ⊙ kan_layer_forward(p, x)`.
pub fn kan_layer_backward(
    p: &KanLayerParams,
    knots: &KnotVector,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<(KanLayerParams, Matrix)> {
    let (d_in, d_out) = (p.d_in(), p.d_out());
    check_width("kan_layer_backward", d_in, x)?;
    check_basis("kan_layer_backward", p.coef.num_basis, knots)?;
    check_upstream("kan_layer_backward", x.rows(), d_out, upstream)?;
    let mut g = KanLayerParams::zeros(d_in, d_out, p.coef.num_basis);
    let mut gx = Matrix::zeros(x.rows(), d_in);
    let mut basis = RowBasis::new(d_in, knots.order());
    let mut silu = vec![0.0; d_in];
    let mut dsilu = vec![0.0; d_in];
    for r in 0..x.rows() {
        let row = x.row(r);
        basis.fill(knots, row, true);
        for i in 0..d_in {
            silu[i] = ActivationKind::Silu.eval(row[i]);
            dsilu[i] = ActivationKind::Silu.grad(row[i]);
        }
        let up = upstream.row(r);
        let gxr = gx.row_mut(r);
        for j in 0..d_out {
            let gj = up[j];
            if gj == 0.0 {
                continue;
            }
            g.bias[j] += gj;
            for i in 0..d_in {
                let coef = p.coef.edge(j, i);
                let ws = p.w_spline.get(j, i);
                let s = basis.dot(i, coef);
                let ds = basis.dot_grad(i, coef);
                let gw = g.w_spline.get(j, i);
                g.w_spline.set(j, i, gw + gj * s);
                let gb = g.w_shortcut.get(j, i);
                g.w_shortcut.set(j, i, gb + gj * silu[i]);
                basis.scatter(i, gj * ws, g.coef.edge_mut(j, i));
                gxr[i] += gj * (ws * ds + p.w_shortcut.get(j, i) * dsilu[i]);
            }
        }
    }
    Ok((g, gx))
}

/// `W · σ(x) + b` when `pre_activation` is set, otherwise `W · x + b`.
pub fn mlp_layer_forward(p: &MlpLayerParams, pre_activation: Option<ActivationKind>, x: &Matrix) -> Result<Matrix> {
    check_width("mlp_layer_forward", p.d_in(), x)?;
    let a = match pre_activation {
        Some(kind) => x.map(|v| kind.eval(v)),
        None => x.clone(),
    };
    Ok(affine(&p.weight, &p.bias, &a))
}

fn affine(w: &Matrix, b: &[f64], a: &Matrix) -> Matrix {
    let d_out = w.rows();
    let mut out = Matrix::zeros(a.rows(), d_out);
    for r in 0..a.rows() {
        let ar = a.row(r);
        let orow = out.row_mut(r);
        for j in 0..d_out {
            let mut acc = b[j];
            for (wv, av) in w.row(j).iter().zip(ar) {
                acc += wv * av;
            }
            orow[j] = acc;
        }
    }
    out
}

/// Returns `(dW, db, da)` for `y = a Wᵀ + b`.
fn affine_backward(w: &Matrix, a: &Matrix, up: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (d_out, d_in) = w.shape();
    let mut gw = Matrix::zeros(d_out, d_in);
    let mut gb = vec![0.0; d_out];
    let mut ga = Matrix::zeros(a.rows(), d_in);
    for r in 0..a.rows() {
        let ar = a.row(r);
        let ur = up.row(r);
        let gar = ga.row_mut(r);
        for j in 0..d_out {
            let u = ur[j];
            if u == 0.0 {
                continue;
            }
            gb[j] += u;
            let wr = w.row(j);
            let gwr = gw.row_mut(j);
            for i in 0..d_in {
                gwr[i] += u * ar[i];
                gar[i] += u * wr[i];
            }
        }
    }
    (gw, gb, ga)
}

pub fn mlp_layer_backward(
    p: &MlpLayerParams,
    pre_activation: Option<ActivationKind>,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<(MlpLayerParams, Matrix)> {
    check_width("mlp_layer_backward", p.d_in(), x)?;
    check_upstream("mlp_layer_backward", x.rows(), p.d_out(), upstream)?;
    let a = match pre_activation {
        Some(kind) => x.map(|v| kind.eval(v)),
        None => x.clone(),
    };
    let (weight, bias, mut ga) = affine_backward(&p.weight, &a, upstream);
    if let Some(kind) = pre_activation {
        for (g, &xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *g *= kind.grad(xv);
        }
    }
    Ok((MlpLayerParams { weight, bias }, ga))
}

fn spline_rows(coef: &Matrix, knots: &KnotVector, x: &Matrix) -> Matrix {
    let mut basis = RowBasis::new(x.cols(), knots.order());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        basis.fill(knots, x.row(r), false);
        for (i, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = basis.dot(i, coef.row(i));
        }
    }
    out
}

pub fn spline_mlp_layer_forward(p: &SplineMlpLayerParams, knots: &KnotVector, x: &Matrix) -> Result<Matrix> {
    check_width("spline_mlp_layer_forward", p.d_in(), x)?;
    check_basis("spline_mlp_layer_forward", p.act_coef.cols(), knots)?;
    Ok(match p.placement {
        SplinePlacement::Pre => affine(&p.weight, &p.bias, &spline_rows(&p.act_coef, knots, x)),
        SplinePlacement::Post => spline_rows(&p.act_coef, knots, &affine(&p.weight, &p.bias, x)),
    })
}

pub fn spline_mlp_layer_backward(
    p: &SplineMlpLayerParams,
    knots: &KnotVector,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<(SplineMlpLayerParams, Matrix)> {
    check_width("spline_mlp_layer_backward", p.d_in(), x)?;
    check_basis("spline_mlp_layer_backward", p.act_coef.cols(), knots)?;
    check_upstream("spline_mlp_layer_backward", x.rows(), p.d_out(), upstream)?;
    let nb = p.act_coef.cols();
    let mut act_coef = Matrix::zeros(p.act_coef.rows(), nb);

    // Backpropagates `up` through elementwise splines evaluated at `z`,
    // accumulating coefficient gradients.
    let through_splines = |z: &Matrix, up: &Matrix, act_coef: &mut Matrix| -> Matrix {
        let mut basis = RowBasis::new(z.cols(), knots.order());
        let mut gz = Matrix::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            basis.fill(knots, z.row(r), true);
            let ur = up.row(r);
            let gzr = gz.row_mut(r);
            for i in 0..z.cols() {
                let coef = p.act_coef.row(i);
                gzr[i] = ur[i] * basis.dot_grad(i, coef);
                basis.scatter(i, ur[i], act_coef.row_mut(i));
            }
        }
        gz
    };

    match p.placement {
        SplinePlacement::Pre => {
            let a = spline_rows(&p.act_coef, knots, x);
            let (weight, bias, ga) = affine_backward(&p.weight, &a, upstream);
            let gx = through_splines(x, &ga, &mut act_coef);
            Ok((
                SplineMlpLayerParams {
                    weight,
                    bias,
                    act_coef,
                    placement: p.placement,
                },
                gx,
            ))
        }
        SplinePlacement::Post => {
            let z = affine(&p.weight, &p.bias, x);
            let gz = through_splines(&z, upstream, &mut act_coef);
            let (weight, bias, gx) = affine_backward(&p.weight, x, &gz);
            Ok((
                SplineMlpLayerParams {
                    weight,
                    bias,
                    act_coef,
                    placement: p.placement,
                },
                gx,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::spline_eval;

    fn hat_spec() -> SplineSpec {
        SplineSpec::new(2, 1, 0.0, 2.0).unwrap()
    }

    fn rand_matrix(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
    }

    #[test]
    fn kan_one_to_one_example() {
        let spec = hat_spec();
        let kv = make_knots(&spec);
        let mut p = KanLayerParams::zeros(1, 1, 3);
        p.coef.data.copy_from_slice(&[1.0, 2.0, 3.0]);
        p.w_spline.set(0, 0, 1.0);
        p.w_shortcut.set(0, 0, 1.0);
        let x = Matrix::row_vector(&[0.5]);
        let y = kan_layer_forward(&p, &kv, &x).unwrap();
        assert!((y.get(0, 0) - 1.811229).abs() < 1e-6);
        assert!((y.get(0, 0) - (1.5 + 0.5 * crate::nn::sigmoid(0.5))).abs() < 1e-15);

        let (g, _) = kan_layer_backward(&p, &kv, &x, &Matrix::row_vector(&[1.0])).unwrap();
        assert!((g.w_spline.get(0, 0) - 1.5).abs() < 1e-15);
        assert_eq!(g.coef.data, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn kan_zero_and_shortcut_only() {
        let spec = SplineSpec::new(5, 3, -1.0, 1.0).unwrap();
        let kv = make_knots(&spec);
        let p = KanLayerParams::zeros(3, 2, spec.num_basis());
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        assert_eq!(kan_layer_forward(&p, &kv, &x).unwrap().as_slice(), &[0.0, 0.0]);

        let mut rng = Rng::new(1);
        let mut p = build_kan_layer(&mut rng, 3, 2, &spec);
        p.w_spline.as_mut_slice().fill(0.0);
        p.bias = vec![0.25, -0.5];
        let y = kan_layer_forward(&p, &kv, &x).unwrap();
        for j in 0..2 {
            let expect: f64 = p.bias[j]
                + (0..3)
                    .map(|i| p.w_shortcut.get(j, i) * ActivationKind::Silu.eval(x.get(0, i)))
                    .sum::<f64>();
            assert!((y.get(0, j) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn kan_constant_coefficients_reduce_to_weighted_sum() {
        let spec = SplineSpec::new(4, 2, -1.0, 1.0).unwrap();
        let kv = make_knots(&spec);
        let mut rng = Rng::new(2);
        let mut p = build_kan_layer(&mut rng, 4, 3, &spec);
        p.w_shortcut.as_mut_slice().fill(0.0);
        let consts: Vec<f64> = (0..12).map(|_| rng.normal(0.0, 1.0)).collect();
        for j in 0..3 {
            for i in 0..4 {
                p.coef.edge_mut(j, i).fill(consts[j * 4 + i]);
            }
        }
        let x = rand_matrix(&mut rng, 5, 4, -1.0, 1.0);
        let y = kan_layer_forward(&p, &kv, &x).unwrap();
        for r in 0..5 {
            for j in 0..3 {
                let expect: f64 = (0..4).map(|i| p.w_spline.get(j, i) * consts[j * 4 + i]).sum();
                assert!((y.get(r, j) - expect).abs() < 1e-12);
            }
        }
    }

    fn build_kan_layer(rng: &mut Rng, d_in: usize, d_out: usize, spec: &SplineSpec) -> KanLayerParams {
        let m = build_model(&ArchSpec::kan(&[d_in, d_out], *spec), rng).unwrap();
        match &m.stages()[0] {
            Stage::Kan(p) => p.clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn kan_upstream_zero_gives_zero_grads() {
        let spec = SplineSpec::new(3, 3, -1.0, 1.0).unwrap();
        let kv = make_knots(&spec);
        let mut rng = Rng::new(4);
        let p = build_kan_layer(&mut rng, 3, 2, &spec);
        let x = rand_matrix(&mut rng, 4, 3, -1.0, 1.0);
        let (g, gx) = kan_layer_backward(&p, &kv, &x, &Matrix::zeros(4, 2)).unwrap();
        assert!(g.coef.data.iter().all(|&v| v == 0.0));
        assert!(g.w_spline.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.w_shortcut.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            kan_layer_backward(&p, &kv, &x, &Matrix::zeros(4, 3)),
            Err(Error::Shape { .. })
        ));
        assert!(kan_layer_forward(&p, &kv, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn mlp_layer_examples() {
        let p = MlpLayerParams {
            weight: Matrix::identity(2),
            bias: vec![0.0, 0.0],
        };
        let x = Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        let y = mlp_layer_forward(&p, Some(ActivationKind::Relu), &x).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 2.0]);
        let p = MlpLayerParams {
            weight: Matrix::zeros(3, 2),
            bias: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(mlp_layer_forward(&p, None, &x).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert!(mlp_layer_forward(&p, None, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn spline_mlp_partition_and_isolation() {
        let spec = SplineSpec::new(5, 3, -1.0, 1.0).unwrap();
        let kv = make_knots(&spec);
        let mut rng = Rng::new(6);
        let c = 0.7;
        let mut p = SplineMlpLayerParams::zeros(3, 2, spec.num_basis(), SplinePlacement::Pre);
        p.weight = rand_matrix(&mut rng, 2, 3, -1.0, 1.0);
        p.bias = vec![0.1, -0.2];
        p.act_coef.as_mut_slice().fill(c);
        let x = rand_matrix(&mut rng, 4, 3, -1.0, 1.0);
        let y = spline_mlp_layer_forward(&p, &kv, &x).unwrap();
        for r in 0..4 {
            for j in 0..2 {
                let expect = c * p.weight.row(j).iter().sum::<f64>() + p.bias[j];
                assert!((y.get(r, j) - expect).abs() < 1e-12);
            }
        }

        let mut post = SplineMlpLayerParams::zeros(3, 3, spec.num_basis(), SplinePlacement::Post);
        post.weight = Matrix::identity(3);
        post.act_coef = rand_matrix(&mut rng, 3, spec.num_basis(), -1.0, 1.0);
        let y = spline_mlp_layer_forward(&post, &kv, &x).unwrap();
        for r in 0..4 {
            for j in 0..3 {
                let expect = spline_eval(post.act_coef.row(j), &kv, x.get(r, j)).unwrap();
                assert!((y.get(r, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn spline_pre_additive_oracle() {
        let spec = SplineSpec::new(6, 3, -1.0, 1.0).unwrap();
        let arch = ArchSpec::spline_mlp(ArchKind::MlpSplinePre, &[4, 1], spec);
        let mut rng = Rng::new(8);
        let mut m = build_model(&arch, &mut rng).unwrap();
        if let Stage::SplineMlp(p) = &mut m.stages_mut()[0] {
            p.weight.as_mut_slice().fill(1.0);
        }
        let x = rand_matrix(&mut rng, 6, 4, -1.0, 1.0);
        let y = m.forward(&x).unwrap();
        let Stage::SplineMlp(p) = &m.stages()[0] else {
            unreachable!()
        };
        let kv = make_knots(&spec);
        for r in 0..6 {
            let oracle: f64 = (0..4)
                .map(|i| spline_eval(p.act_coef.row(i), &kv, x.get(r, i)).unwrap())
                .sum();
            assert!((y.get(r, 0) - oracle).abs() < 1e-13);
        }
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let arch = ArchSpec::mlp(&[2, 3, 1], ActivationKind::Relu);
        let a = build_model(&arch, &mut Rng::new(5)).unwrap();
        let b = build_model(&arch, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let shapes: Vec<usize> = a.param_slices().iter().map(|s| s.len()).collect();
        assert_eq!(shapes, vec![6, 3, 3, 1]);
        let bound = (1.0f64 / 2.0).sqrt();
        let Stage::Linear { params, .. } = &a.stages()[0] else {
            unreachable!()
        };
        assert!(params.weight.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(params.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn coefficient_init_mean_is_near_zero() {
        let spec = SplineSpec::new(10, 3, -1.0, 1.0).unwrap();
        let arch = ArchSpec::kan(&[31, 25], spec);
        let m = build_model(&arch, &mut Rng::new(9)).unwrap();
        let Stage::Kan(p) = &m.stages()[0] else { unreachable!() };
        let n = p.coef.data.len();
        assert!(n >= 10_000);
        let mean = p.coef.data.iter().sum::<f64>() / n as f64;
        let three_sigma = 3.0 * 0.1 / (n as f64).sqrt();
        assert!(mean.abs() < three_sigma, "mean {mean} vs {three_sigma}");
        assert!(p.w_spline.as_slice().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn arch_validation() {
        assert!(ArchSpec::mlp(&[784], ActivationKind::Relu).validate().is_err());
        assert!(ArchSpec::mlp(&[3, 0, 1], ActivationKind::Relu).validate().is_err());
        let mut kan = ArchSpec::kan(&[2, 1], hat_spec());
        kan.spline = None;
        assert!(kan.validate().is_err());
        let mut kan = ArchSpec::kan(&[2, 1], hat_spec());
        kan.use_norm = true;
        assert!(kan.validate().is_err());
    }

    #[test]
    fn nonlinear_first_and_last_mlp_agree() {
        let mut last = ArchSpec::mlp(&[3, 6, 5, 2], ActivationKind::Gelu);
        last.use_norm = true;
        let mut first = last.clone();
        first.nonlinear_first = true;
        let a = build_model(&last, &mut Rng::new(3)).unwrap();
        let b = build_model(&first, &mut Rng::new(3)).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        let x = rand_matrix(&mut Rng::new(4), 7, 3, -2.0, 2.0);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn flat_round_trip() {
        let spec = SplineSpec::new(3, 2, -1.0, 1.0).unwrap();
        let arch = ArchSpec::kan(&[2, 3, 1], spec);
        let mut m = build_model(&arch, &mut Rng::new(1)).unwrap();
        let flat = m.to_flat();
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        m.load_flat(&doubled).unwrap();
        assert_eq!(m.to_flat(), doubled);
        assert!(m.load_flat(&flat[1..]).is_err());
    }
}
