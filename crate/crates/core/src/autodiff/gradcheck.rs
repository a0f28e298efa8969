//! Central finite-difference gradient checking in f64.

use super::{Tape, Tensor, TensorError, Var};

/// Result of comparing backward gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst per-input `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_error: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Builds the graph with `f` on fresh tapes and compares the backward pass
/// against `(f(x + h) − f(x − h)) / 2h` for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = na.max(nn);
            if scale < 1e-12 {
                diff
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}
