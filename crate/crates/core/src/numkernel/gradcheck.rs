//! Central finite-difference verification of recorded-graph gradients.

use super::{Graph, KernelError, Matrix, ParamStore, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked_entries: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// ‖a − n‖ / max(‖a‖, ‖n‖, 1e-8).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-8)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64, KernelError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, KernelError>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if v.shape() != (1, 1) {
        return Err(KernelError::Shape { op: "gradcheck", left: v.shape(), right: (1, 1) });
    }
    Ok(v.get(0, 0))
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences for every trainable parameter. At most `max_entries` entries
/// per tensor are perturbed, chosen at an even stride.
pub fn check_params<F>(store: &ParamStore, h: f64, max_entries: Option<usize>, f: F) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, KernelError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut probe = store.clone();
    let mut tensors = Vec::new();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).data().len();
        let picks: Vec<usize> = match max_entries {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        let zero = Matrix::zeros(store.value(id).rows(), store.value(id).cols());
        let grad = analytic.param(id).unwrap_or(&zero);
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &k in &picks {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe, &f)?;
            probe.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe, &f)?;
            probe.value_mut(id).data_mut()[k] = orig;
            num.push((up - down) / (2.0 * h));
            a.push(grad.data()[k]);
        }
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            checked_entries: picks.len(),
            analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
            rel_error: relative_error(&a, &num),
        });
    }
    Ok(GradCheckReport { tensors })
}
