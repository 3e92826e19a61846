use crate::tape::{Tape, ValueId};
use crate::tensor::{NumericsError, Tensor};

/// Default step for central differences.
pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

/// Compare the tape's analytic gradient of a scalar-valued map against
/// central finite differences over every input coordinate.
///
/// Returns the maximum over coordinates of
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId, NumericsError>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(NumericsError::InvalidArgument(
                "grad_check target must be scalar-valued".into(),
            ));
        }
        Ok(v.scalar_value())
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).is_scalar() {
        return Err(NumericsError::InvalidArgument(
            "grad_check target must be scalar-valued".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].len()])
        })
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(NumericsError::NonFinite { op: "grad_check" });
            }
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
