use super::{Result, Tape, Tensor, TensorError, Var};

/// `|a − b| / max(1e-12, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

/// Compares tape gradients against central finite differences at every
/// coordinate of `point`. `f` builds a scalar from the input variable.
///
/// Uses the fourth-order five-point stencil, so moderate steps (around
/// `1e-4`) keep both truncation and rounding error small. ReLUs keep the
/// on/off pattern of the base point during the shifted evaluations, so the
/// comparison is against the derivative of the piece the tape actually
/// differentiated rather than a secant across a kink.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(f, point, step, &coords)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_coords<F>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = coords.iter().map(|&i| (0, i)).collect();
    finite_diff_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(point), step, &coords)
}

/// Multi-input form: `f` receives one leaf per tensor in `points` and
/// `coords` lists `(tensor, flat index)` pairs to check.
pub fn finite_diff_check_multi<F>(
    f: F,
    points: &[Tensor<f64>],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid("finite difference step must be > 0".into()));
    }
    let mut tape = Tape::new();
    let xs: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let y = f(&mut tape, &xs)?;
    let grads = tape.backward(y)?;
    let pattern = tape.relu_pattern();
    let analytic: Vec<Tensor<f64>> = xs
        .iter()
        .zip(points)
        .map(|(&x, p)| grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: Vec<Tensor<f64>>| -> Result<f64> {
        let mut tape = Tape::with_relu_pattern(pattern.clone());
        let xs: Vec<Var> = ps.into_iter().map(|p| tape.leaf(p)).collect();
        let y = f(&mut tape, &xs)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for &(t, i) in coords {
        let bound = points.get(t).map_or(0, Tensor::len);
        if i >= bound {
            return Err(TensorError::IndexOutOfRange {
                op: "finite_diff_check",
                index: i,
                bound,
            });
        }
        let shifted = |k: f64| {
            let mut ps = points.to_vec();
            ps[t].data_mut()[i] += k * step;
            eval(ps)
        };
        let near = shifted(1.0)? - shifted(-1.0)?;
        let far = shifted(2.0)? - shifted(-2.0)?;
        let fd = (8.0 * near - far) / (12.0 * step);
        worst = worst.max(relative_error(analytic[t].data()[i], fd));
    }
    Ok(worst)
}
