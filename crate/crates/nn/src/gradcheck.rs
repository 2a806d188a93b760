use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare reverse-mode gradients of `f` against central finite differences
/// with step `h`, in f64. `f` receives a fresh tape plus one parameter var per
/// entry of `params` and returns a scalar loss.
///
/// Returns the largest relative error `|a - n| / max(|a|, |n|, 1e-7)` over all
/// parameter elements.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        for j in 0..p.numel() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
