use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn scalar_output<E: From<AutodiffError>>(tape: &Tape, out: Var) -> Result<f64, E> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(tape.shape(out).to_vec()).into());
    }
    Ok(v[0])
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with step `step`, over every coordinate of every
/// input in `points`.
pub fn grad_check_many<F, E>(f: F, points: &[Tensor], step: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(AutodiffError::InvalidStep(step).into());
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_output::<E>(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            grads
                .get(v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_output::<E>(&tape, out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (i, point) in points.iter().enumerate() {
        for j in 0..point.numel() {
            let x = point.values()[j];
            work[i].values_mut()[j] = x + step;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = x - step;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report = GradCheckReport {
                    max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
                    worst_input: i,
                    worst_index: j,
                    analytic: a,
                    numeric,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`], returning the maximum relative
/// error.
pub fn grad_check<F, E>(f: F, point: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
        .map(|r| r.max_rel_error)
}
