//! Central finite-difference checks of model gradients.

use crate::bspline::SplineSpec;
use crate::error::Result;
use crate::layers::{ArchKind, ArchSpec, Model};
use crate::nn::{ActivationKind, Matrix, Rng};

/// Relative errors `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub params_rel: f64,
    pub input_rel: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.params_rel.max(self.input_rel)
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn objective(model: &Model, x: &Matrix, upstream: &Matrix) -> Result<f64> {
    let y = model.forward(x)?;
    Ok(y.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum())
}

/// Compares `Model::backward` against central differences of
/// `Σ upstream ⊙ model(x)` with step `h`, over every parameter and input.
pub fn check_model_gradients(model: &Model, x: &Matrix, upstream: &Matrix, h: f64) -> Result<GradCheck> {
    let (_, cache) = model.forward_cached(x)?;
    let (grads, dx) = model.backward(&cache, upstream)?;
    let analytic = grads.to_flat();

    let mut probe = model.clone();
    let base = model.to_flat();
    let mut flat = base.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        probe.load_flat(&flat)?;
        let up = objective(&probe, x, upstream)?;
        flat[i] = base[i] - h;
        probe.load_flat(&flat)?;
        let down = objective(&probe, x, upstream)?;
        flat[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }

    let mut xs = x.clone();
    let mut numeric_dx = Vec::with_capacity(x.as_slice().len());
    for i in 0..x.as_slice().len() {
        let v = x.as_slice()[i];
        xs.as_mut_slice()[i] = v + h;
        let up = objective(model, &xs, upstream)?;
        xs.as_mut_slice()[i] = v - h;
        let down = objective(model, &xs, upstream)?;
        xs.as_mut_slice()[i] = v;
        numeric_dx.push((up - down) / (2.0 * h));
    }

    Ok(GradCheck {
        params_rel: rel_error(&analytic, &numeric),
        input_rel: rel_error(dx.as_slice(), &numeric_dx),
    })
}

/// A small random architecture of `kind`: two or three layers, widths in
/// `1..=max_width`, spline order 2 or 3.
pub fn random_small_arch(kind: ArchKind, max_width: usize, rng: &mut Rng) -> ArchSpec {
    let layers = 2 + rng.below(2);
    let widths: Vec<usize> = (0..=layers).map(|_| 1 + rng.below(max_width)).collect();
    let half = [1.0, 2.0][rng.below(2)];
    let spline = SplineSpec::new(2 + rng.below(5), 2 + rng.below(2), -half, half).expect("valid spline spec");
    let activation = ActivationKind::ALL[rng.below(3)];
    let mut arch = match kind {
        ArchKind::Kan => ArchSpec::kan(&widths, spline),
        ArchKind::Mlp => ArchSpec::mlp(&widths, activation),
        k => ArchSpec::spline_mlp(k, &widths, spline),
    };
    if kind != ArchKind::Kan {
        arch.use_norm = rng.below(2) == 1;
    }
    if kind == ArchKind::Mlp {
        arch.nonlinear_first = rng.below(2) == 1;
    }
    arch
}

/// Random batch and upstream weights for `model`.
pub fn random_probe(model: &Model, rows: usize, rng: &mut Rng) -> (Matrix, Matrix) {
    let arch = model.arch();
    let x: Vec<f64> = (0..rows * arch.input_dim()).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let u: Vec<f64> = (0..rows * arch.output_dim()).map(|_| rng.normal(0.0, 1.0)).collect();
    (
        Matrix::from_vec(rows, arch.input_dim(), x).expect("sized"),
        Matrix::from_vec(rows, arch.output_dim(), u).expect("sized"),
    )
}
