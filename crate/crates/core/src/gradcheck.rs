//! Central finite-difference checks of tape gradients.
//!
//! An entry whose left and right one-sided differences disagree sits on a
//! kink (hinge, ReLU, absolute value, a switch of the top-two prototypes)
//! and is skipped rather than scored.

use ndarray::Array2;

use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Left/right slope disagreement (relative) that marks a kink.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-6,
            kink_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[i]` (`None` meaning zero) against central differences
/// of `loss` for every entry of every parameter in `params`.
pub fn check_gradients(
    params: &mut ParamSet,
    analytic: &[Option<Array2<f64>>],
    mut loss: impl FnMut(&ParamSet) -> f64,
    opts: &GradCheckOptions,
) -> GradCheck {
    assert_eq!(analytic.len(), params.len());
    let base = loss(params);
    let mut report = GradCheck::default();
    let ids: Vec<_> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let grad = grad.as_ref().map(|g| g.as_standard_layout().into_owned());
        let len = params.get(id).len();
        for flat in 0..len {
            let original = params.get(id).as_slice().expect("standard layout")[flat];
            let mut at = |v: f64, params: &mut ParamSet| {
                params.get_mut(id).as_slice_mut().expect("standard layout")[flat] = v;
                loss(params)
            };
            let plus = at(original + opts.step, params);
            let minus = at(original - opts.step, params);
            at(original, params);
            let right = (plus - base) / opts.step;
            let left = (base - minus) / opts.step;
            if relative_error(right, left, opts.floor.max(1e-4)) > opts.kink_tolerance {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.as_ref().map_or(0.0, |g| g.as_slice().expect("standard layout")[flat]);
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), flat));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::array;

    fn quadratic(p: &ParamSet) -> f64 {
        p.values()[0].iter().map(|x| x * x * x).sum()
    }

    #[test]
    fn exact_gradient_passes_and_wrong_one_fails() {
        let mut p = ParamSet::new();
        p.add("w", array![[0.5, -1.0, 2.0]]);
        let good = p.values()[0].mapv(|x| 3.0 * x * x);
        let r = check_gradients(&mut p, &[Some(good.clone())], quadratic, &GradCheckOptions::default());
        assert!(r.max_rel_error < 1e-6 && r.checked == 3);
        let bad = &good * 1.1;
        let r = check_gradients(&mut p, &[Some(bad)], quadratic, &GradCheckOptions::default());
        assert!(r.max_rel_error > 0.05);
        assert_eq!(r.worst.unwrap().0, "w");
    }

    #[test]
    fn kinks_are_skipped() {
        let mut p = ParamSet::new();
        p.add("w", array![[0.0, 1.0]]);
        let abs = |p: &ParamSet| p.values()[0].iter().map(|x| x.abs()).sum::<f64>();
        let r = check_gradients(&mut p, &[Some(array![[0.0, 1.0]])], abs, &GradCheckOptions::default());
        assert_eq!((r.checked, r.skipped_kinks), (1, 1));
    }

    #[test]
    fn tape_softmax_gradients() {
        let mut p = ParamSet::new();
        p.add("x", array![[0.3, -1.2, 0.8], [2.0, 0.1, -0.4]]);
        let weights = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]];
        let run = |p: &ParamSet| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, true);
            let s = tape.row_softmax(b.vars()[0]);
            let w = tape.constant(weights.clone());
            let prod = tape.matmul_nt(s, w);
            let picked = tape.gather_rows(prod, std::rc::Rc::new(vec![0]));
            let ones = tape.constant(Array2::ones((2, 1)));
            let picked = tape.matmul(picked, ones);
            (tape.scalar(picked), tape.backward(picked).take(b.vars()[0]))
        };
        let (_, g) = run(&p);
        let r = check_gradients(&mut p, &[g], |p| run(p).0, &GradCheckOptions::default());
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
