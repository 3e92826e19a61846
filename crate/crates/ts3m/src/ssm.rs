use crate::Ts3mError;
use umami_numerics::ssm as kernel;
use umami_numerics::{NumericsError, Tensor};

/// Zero-order-hold discretization of a diagonal state-space system.
///
/// `a_diag` is the 1-D diagonal of A, `b` is d_state×d_in, `delta` the
/// positive timescale shared across channels. Returns (Â as a 1-D diagonal,
/// B̂ as d_state×d_in); each entry follows
/// Â_i = e^{Δ a_i}, B̂_i = ((e^{Δ a_i} − 1)/(Δ a_i)) · Δ · B_i with the
/// series limit Δ·B_i once |Δ a_i| < 1e-8.
pub fn ssm_discretize(
    a_diag: &Tensor,
    b: &Tensor,
    delta: f64,
) -> Result<(Tensor, Tensor), Ts3mError> {
    if delta <= 0.0 {
        return Err(Ts3mError::Numerics(NumericsError::InvalidArgument(
            format!("discretization timescale must be positive, got {delta}"),
        )));
    }
    let d_state = a_diag.len();
    if b.shape().len() != 2 || b.rows() != d_state {
        return Err(Ts3mError::Numerics(NumericsError::Dimension {
            op: "ssm_discretize",
            left: a_diag.shape().to_vec(),
            right: b.shape().to_vec(),
        }));
    }
    let d_in = b.cols();
    let (a_hat, b_hat, _, _) =
        kernel::discretize_buffers(a_diag.data(), b.data(), d_in, &vec![delta; d_state])?;
    Ok((
        Tensor::new(vec![d_state], a_hat)?,
        Tensor::new(vec![d_state, d_in], b_hat)?,
    ))
}

/// Linear state scan from h(0) = 0:
/// h(t) = Â h(t−1) + B̂ x(t), y(t) = C h(t) + D x(t), stacked over t.
pub fn ssm_scan(
    x: &Tensor,
    a_hat: &Tensor,
    b_hat: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<Tensor, Ts3mError> {
    let dims = kernel::ScanDims {
        t_len: x.rows(),
        d_in: x.cols(),
        d_state: a_hat.len(),
        d_out: c.rows(),
    };
    let shapes_ok = b_hat.shape() == [dims.d_state, dims.d_in]
        && c.shape() == [dims.d_out, dims.d_state]
        && d.shape() == [dims.d_out, dims.d_in];
    if !shapes_ok {
        return Err(Ts3mError::Numerics(NumericsError::Dimension {
            op: "ssm_scan",
            left: x.shape().to_vec(),
            right: b_hat.shape().to_vec(),
        }));
    }
    let (y, _) = kernel::scan_with_states(
        x.data(),
        dims,
        a_hat.data(),
        b_hat.data(),
        c.data(),
        d.data(),
    );
    Ok(Tensor::new(vec![dims.t_len, dims.d_out], y)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_scalar_example() {
        let a = Tensor::new(vec![1], vec![-1.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (a_hat, b_hat) = ssm_discretize(&a, &b, 0.1).unwrap();
        assert!((a_hat.data()[0] - 0.9048374).abs() < 1e-7);
        assert!((b_hat.data()[0] - 0.0951626).abs() < 1e-7);
    }

    #[test]
    fn discretize_rejects_nonpositive_delta() {
        let a = Tensor::new(vec![1], vec![-1.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(ssm_discretize(&a, &b, 0.0).is_err());
        assert!(ssm_discretize(&a, &b, -1.0).is_err());
    }

    #[test]
    fn scan_zero_input_gives_zero_output() {
        let a = Tensor::new(vec![2], vec![-1.0, -2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 0.5]).unwrap();
        let (a_hat, b_hat) = ssm_discretize(&a, &b, 0.2).unwrap();
        let c = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let d = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let x = Tensor::zeros(vec![5, 1]);
        let y = ssm_scan(&x, &a_hat, &b_hat, &c, &d).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_single_step_is_c_bhat_plus_d() {
        let a = Tensor::new(vec![1], vec![-0.5]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let (a_hat, b_hat) = ssm_discretize(&a, &b, 0.3).unwrap();
        let c = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
        let d = Tensor::new(vec![1, 1], vec![-0.25]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let y = ssm_scan(&x, &a_hat, &b_hat, &c, &d).unwrap();
        let want = 0.8 * b_hat.data()[0] * 2.0 + (-0.25) * 2.0;
        assert!((y.data()[0] - want).abs() < 1e-15);
    }
}
