use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the gradient of a scalar function at `point`.
///
/// The per-entry error is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = max(1e-6, 1e-3 * max_j |n_j|)`, so entries far below the
/// gradient's overall scale are judged against that scale.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |p: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        let v = g.value(y);
        if v.numel() != 1 {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).expect("input tracks gradient").data().to_vec();

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-6);
    let (mut max_rel_error, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if !err.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}
