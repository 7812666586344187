//! Central finite-difference verification of tape gradients.

use crate::{Tape, Tensor, Var};

/// Analytic versus numeric gradient for one input.
#[derive(Clone, Debug)]
pub struct GradComparison {
    /// Flat indices that were probed.
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the
    /// probed coordinates.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let diff = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(floor)
    }

    pub fn analytic_norm(&self) -> f64 {
        self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Upper bound on probed coordinates per input; evenly strided when the
    /// input is larger.
    pub max_probes: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_probes: usize::MAX,
        }
    }
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    // Odd stride offset so probes do not all land on the same channel phase.
    let step = len as f64 / max as f64;
    (0..max)
        .map(|i| ((i as f64 + 0.37) * step) as usize)
        .map(|i| i.min(len - 1))
        .collect()
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences, one comparison per input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Vec<GradComparison>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        f(&tape, &vars).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic_full = grads.get_or_zeros(*var);
        let indices = probe_indices(inputs[i].len(), opts.max_probes);
        let mut analytic = Vec::with_capacity(indices.len());
        let mut numeric = Vec::with_capacity(indices.len());
        for &j in &indices {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * opts.eps));
            analytic.push(analytic_full.data()[j]);
        }
        result.push(GradComparison {
            indices,
            analytic,
            numeric,
        });
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]);
        let cmp = check_gradients(
            &[x],
            |_, v| v[0].square().sum(),
            GradCheckOptions::default(),
        );
        assert!(cmp[0].relative_error(1e-12) < 1e-8);
        assert_eq!(cmp[0].analytic, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn probes_are_bounded_and_distinct() {
        let idx = probe_indices(1000, 10);
        assert_eq!(idx.len(), 10);
        let mut d = idx.clone();
        d.dedup();
        assert_eq!(d.len(), 10);
        assert!(idx.iter().all(|&i| i < 1000));
    }
}
