//! Central-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Compare analytic gradients against central finite differences.
///
/// `f` builds a scalar loss from tape-bound parameters; it is called once for
/// the analytic pass and `2 * total_elements` times for the numeric one, so it
/// must be deterministic (dropout disabled). Returns the maximum over all
/// parameter elements of `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn check_gradients<F>(mut f: F, params: &BTreeMap<String, Tensor>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &BTreeMap<String, Tensor>) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {h}"
        )));
    }

    let mut tape = Tape::new();
    let bound: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(name, value)| (name.clone(), tape.var(value)))
        .collect();
    let loss = f(&mut tape, &bound)?;
    if !loss.all_finite() {
        return Err(Error::NonFinite("loss".to_string()));
    }
    let grads = tape.backward(&loss)?;

    let mut max_rel = 0.0f64;
    for (name, value) in params {
        let analytic = grads
            .get(&bound[name])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; value.len()]);
        for idx in 0..value.len() {
            let plus = eval_at(&mut f, params, name, idx, h)?;
            let minus = eval_at(&mut f, params, name, idx, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() || !analytic[idx].is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}[{idx}]")));
            }
            let rel = (analytic[idx] - numeric).abs()
                / (analytic[idx].abs() + numeric.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn eval_at<F>(
    f: &mut F,
    params: &BTreeMap<String, Tensor>,
    name: &str,
    idx: usize,
    delta: f64,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &BTreeMap<String, Tensor>) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let bound: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(pname, value)| {
            let tensor = if pname == name {
                let mut data = value.data().to_vec();
                data[idx] += delta;
                Tensor::new(value.shape().to_vec(), data).expect("same shape")
            } else {
                value.clone()
            };
            (pname.clone(), tape.var(&tensor))
        })
        .collect();
    let loss = f(&mut tape, &bound)?;
    if loss.len() != 1 {
        return Err(Error::LossNotScalar(loss.shape().to_vec()));
    }
    Ok(loss.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_checks_to_machine_precision() {
        let mut params = BTreeMap::new();
        params.insert(
            "p".to_string(),
            Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap(),
        );
        let err = check_gradients(
            |tape, bound| {
                let p = &bound["p"];
                let sq = tape.mul(p, p)?;
                Ok(tape.sum(&sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let params = BTreeMap::new();
        assert!(check_gradients(|t, _| Ok(t.sum(&Tensor::scalar(0.0))), &params, 0.0).is_err());
    }
}
