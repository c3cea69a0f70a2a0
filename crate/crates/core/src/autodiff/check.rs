use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `build` against central differences.
///
/// `build` records a scalar loss on the supplied tape and returns its node.
/// Returns `maxᵢ |g_ad,i − g_fd,i| / max(1, |g_fd,i|)`.
pub fn finite_difference_check<F>(build: F, params: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let eval = |p: &[f64]| -> Result<f64> {
        let mut tape = Tape::new(p);
        let l = build(&mut tape)?;
        Ok(tape.scalar(l))
    };
    let ad = {
        let mut tape = Tape::new(params);
        let l = build(&mut tape)?;
        tape.finalize(l)?;
        tape.gradient()?
    };
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = eval(&work)?;
        work[i] = orig - step;
        let down = eval(&work)?;
        work[i] = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((ad[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
