//! Central finite-difference checks of tape gradients at 64-bit.

use crate::autodiff::{NodeId, Tape, Value};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

/// `|g − ĝ| / max(1, |g|, |ĝ|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL && self.checked > 0
    }
}

/// Compare tape gradients of a scalar graph against central differences.
///
/// `build` records the graph on a fresh tape given one node per entry of
/// `inputs` (all trainable) and returns the scalar output node. Every scalar
/// of every input is perturbed.
pub fn check<F>(name: &str, inputs: &[Value<f64>], build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Value<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &ids)?;
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Value<f64>> = inputs.to_vec();
    for (slot, &id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.parts().concat(),
            None => vec![0.0; inputs[slot].parts().iter().map(|p| p.len()).sum()],
        };
        let mut flat = 0;
        for part in 0..inputs[slot].parts().len() {
            let len = inputs[slot].parts()[part].len();
            for e in 0..len {
                let base = inputs[slot].parts()[part][e];
                work[slot].parts_mut()[part][e] = base + FD_STEP;
                let plus = eval(&work)?;
                work[slot].parts_mut()[part][e] = base - FD_STEP;
                let minus = eval(&work)?;
                work[slot].parts_mut()[part][e] = base;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let err = rel_err(analytic[flat], numeric);
                if !err.is_finite() {
                    return Err(Error::Autodiff(format!("{name}: non-finite gradient")));
                }
                report.max_rel_err = report.max_rel_err.max(err);
                report.checked += 1;
                flat += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMap;

    #[test]
    fn relative_error_definition() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert_eq!(rel_err(0.0, 0.5), 0.5);
        assert!((rel_err(10.0, 11.0) - 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn l2_passes() {
        let a = FeatureMap::<f64>::from_vec(1, 2, 1, vec![0.3, -0.7]).unwrap();
        let b = FeatureMap::<f64>::from_vec(1, 2, 1, vec![0.1, 0.2]).unwrap();
        let r = check("l2", &[Value::Map(a), Value::Map(b)], |t, ids| {
            t.l2_loss(ids[0], ids[1])
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 4);
    }
}
