//! Double-precision finite-difference verification of the analytic gradients.

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use super::GradError;

/// Norm-wise relative error between analytic and numeric gradient of one parameter.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

/// Compares `backward` against central differences with step `h` for every
/// scalar of every tensor in `params`. `build` records a scalar loss.
pub fn check_gradients<F>(
    params: &ParamSet<f64>,
    h: f64,
    build: F,
) -> Result<Vec<GradCheck>, GradError>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true)?;
    let loss = build(&mut tape, &bound)?;
    let analytic = tape.backward(loss)?;

    let eval = |p: &ParamSet<f64>| -> Result<f64, GradError> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false)?;
        let loss = build(&mut tape, &bound)?;
        Ok(tape.value(loss)?.item())
    };

    let mut out = Vec::new();
    let mut probe = params.clone();
    for name in params.names() {
        let n = params.get(name)?.len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.get(name)?.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic
            .get(name)
            .ok_or_else(|| GradError::MissingParam(name.clone()))?
            .data();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(GradCheck {
            name: name.clone(),
            rel_error: diff / na.max(nn).max(1e-12),
        });
    }
    Ok(out)
}
