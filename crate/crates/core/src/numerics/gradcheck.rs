use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar on a fresh graph from the given store. The result is
/// the largest `|analytic − numeric| / max(1, |numeric|)` over every scalar of
/// every parameter.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check: eps must be positive, got {eps}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.value(loss).item()
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        g.gradients(loss)?
    };

    let mut work = params.clone();
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for path in &paths {
        let n = params.value(path)?.numel();
        for idx in 0..n {
            let orig = params.value(path)?.data()[idx];
            work.value_mut(path)?.data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work.value_mut(path)?.data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work.value_mut(path)?.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(path).map_or(0.0, |g| g.data()[idx]);
            let err = (exact - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
