use crate::autodiff::dual::DualVar;
use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Value and directional derivative of `program` at `at` along `direction`.
///
/// Both returned nodes live in `g`, so `g.backward(derivative)` yields the
/// gradient of the directional derivative with respect to any parameter the
/// program registered.
pub fn jvp<T, F>(g: &mut Graph<T>, at: &[Tensor<T>], direction: &[Tensor<T>], program: F) -> Result<(Var, Var)>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &[DualVar]) -> Result<DualVar>,
{
    if at.len() != direction.len() {
        return Err(Error::invalid(format!(
            "jvp: {} inputs but {} directions",
            at.len(),
            direction.len()
        )));
    }
    let mut inputs = Vec::with_capacity(at.len());
    for (x, d) in at.iter().zip(direction) {
        let v = g.constant(x.clone());
        inputs.push(DualVar::seeded(g, v, vec![d.clone()])?);
    }
    let out = program(g, &inputs)?;
    let dd = out.tangent_or_zero(g, 0);
    Ok((out.primal, dd))
}

/// Largest `|autodiff − central difference| / (|central difference| + eps)`
/// over every coordinate of every input; `eps` is also the difference step.
pub fn finite_diff_check<T, F>(program: F, at: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::invalid("finite_diff_check: eps must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = at.iter().map(|x| g.input(x.clone())).collect();
    let root = program(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |point: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|x| g.constant(x.clone())).collect();
        let r = program(&mut g, &vars)?;
        g.item(r)
    };

    let two = T::one() + T::one();
    let mut worst = T::zero();
    let mut point = at.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(&g, *v);
        for j in 0..at[i].numel() {
            let orig = at[i].data()[j];
            point[i].data_mut()[j] = orig + eps;
            let up = eval(&point)?;
            point[i].data_mut()[j] = orig - eps;
            let down = eval(&point)?;
            point[i].data_mut()[j] = orig;
            let numeric = (up - down) / (two * eps);
            let err = (analytic.data()[j] - numeric).abs() / (numeric.abs() + eps);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Central differences of a scalar function of a flat parameter vector.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        p[j] = x[j] + h;
        let up = f(&p)?;
        p[j] = x[j] - h;
        let down = f(&p)?;
        p[j] = x[j];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}
