//! Named parameter collections, shared by the optimizer, checkpoints and
//! gradient checks.

use crate::matrix::MatrixF64;

pub trait ParamSet {
    /// Named tensors in a fixed order.
    fn tensors(&self) -> Vec<(String, &MatrixF64)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut MatrixF64)>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }
}

/// Two parameter sets optimized together, tensors prefixed `a.` / `b.`.
pub struct Joint<'a, A: ParamSet + ?Sized, B: ParamSet + ?Sized>(pub &'a mut A, pub &'a mut B);

impl<A: ParamSet + ?Sized, B: ParamSet + ?Sized> ParamSet for Joint<'_, A, B> {
    fn tensors(&self) -> Vec<(String, &MatrixF64)> {
        let mut t: Vec<_> = self
            .0
            .tensors()
            .into_iter()
            .map(|(n, m)| (format!("a.{n}"), m))
            .collect();
        t.extend(self.1.tensors().into_iter().map(|(n, m)| (format!("b.{n}"), m)));
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut MatrixF64)> {
        let mut t: Vec<_> = self
            .0
            .tensors_mut()
            .into_iter()
            .map(|(n, m)| (format!("a.{n}"), m))
            .collect();
        t.extend(self.1.tensors_mut().into_iter().map(|(n, m)| (format!("b.{n}"), m)));
        t
    }
}

/// `dst += scale * src`, tensor by tensor.
pub fn accumulate(dst: &mut dyn ParamSet, src: &dyn ParamSet, scale: f64) {
    for ((_, d), (_, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        for (a, b) in d.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += scale * b;
        }
    }
}

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub n_checked: usize,
}

/// Compares `analytic` with central differences `(L(p+h) - L(p-h)) / 2h`
/// on every entry of `params`, scoring `|a - f| / max(|a|, |f|, floor)`.
pub fn check_gradients<P: ParamSet + Clone>(
    params: &P,
    analytic: &dyn ParamSet,
    h: f64,
    floor: f64,
    loss: impl Fn(&P) -> f64,
) -> GradCheck {
    let grads = analytic.tensors();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        n_checked: 0,
    };
    for (ti, (name, g)) in grads.iter().enumerate() {
        for k in 0..g.as_slice().len() {
            let bump = |d: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti].1.as_mut_slice()[k] += d;
                loss(&p)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let a = g.as_slice()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > out.max_rel_error || out.n_checked == 0 {
                out.max_rel_error = rel;
                out.worst = (name.clone(), k);
            }
            out.n_checked += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Pair(MatrixF64, MatrixF64);

    impl ParamSet for Pair {
        fn tensors(&self) -> Vec<(String, &MatrixF64)> {
            vec![("x".into(), &self.0), ("y".into(), &self.1)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut MatrixF64)> {
            vec![("x".into(), &mut self.0), ("y".into(), &mut self.1)]
        }
    }

    fn loss(p: &Pair) -> f64 {
        let x = p.0.as_slice();
        let y = p.1.as_slice();
        x[0] * x[0] * y[0] + x[1].sin() + y[0].exp()
    }

    #[test]
    fn check_gradients_accepts_exact_and_flags_wrong() {
        let p = Pair(
            MatrixF64::from_vec(1, 2, vec![0.7, -0.3]).unwrap(),
            MatrixF64::from_vec(1, 1, vec![0.2]).unwrap(),
        );
        let exact = Pair(
            MatrixF64::from_vec(1, 2, vec![2.0 * 0.7 * 0.2, (-0.3f64).cos()]).unwrap(),
            MatrixF64::from_vec(1, 1, vec![0.49 + 0.2f64.exp()]).unwrap(),
        );
        let ok = check_gradients(&p, &exact, 1e-4, 1e-8, loss);
        assert_eq!(ok.n_checked, 3);
        assert!(ok.max_rel_error < 1e-7, "{ok:?}");
        let mut wrong = exact.clone();
        wrong.1.as_mut_slice()[0] += 0.01;
        let bad = check_gradients(&p, &wrong, 1e-4, 1e-8, loss);
        assert_eq!(bad.worst, ("y".to_string(), 0));
        assert!(bad.max_rel_error > 1e-3);
    }

    #[test]
    fn accumulate_scales() {
        let mut a = Pair(MatrixF64::zeros(1, 2), MatrixF64::zeros(1, 1));
        let b = Pair(
            MatrixF64::from_vec(1, 2, vec![1.0, 2.0]).unwrap(),
            MatrixF64::from_vec(1, 1, vec![3.0]).unwrap(),
        );
        accumulate(&mut a, &b, 0.5);
        assert_eq!(a.flatten(), vec![0.5, 1.0, 1.5]);
    }
}
