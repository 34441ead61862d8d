//! Penalty terms added to the local objective.
//!
//! Each term exposes its scalar penalty alongside the gradient it contributes,
//! so the two can be checked against each other numerically.

use crate::nn::ParamVector;

pub trait Regularizer {
    fn penalty(&self, w: &[f64]) -> f64;

    /// Adds the penalty gradient at `w` into `grad`.
    fn add_gradient(&self, w: &[f64], grad: &mut [f64]);
}

/// `(alpha / 2) * ||w - center||^2`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub center: &'a [f64],
    pub alpha: f64,
}

impl Regularizer for Proximal<'_> {
    fn penalty(&self, w: &[f64]) -> f64 {
        0.5 * self.alpha
            * w.iter()
                .zip(self.center)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
    }

    fn add_gradient(&self, w: &[f64], grad: &mut [f64]) {
        for ((g, a), c) in grad.iter_mut().zip(w).zip(self.center) {
            *g += self.alpha * (a - c);
        }
    }
}

/// `coef . w`. Used for the stored-gradient term of FedPD/FedDyn and the
/// SCAFFOLD drift correction `c - c_k`.
#[derive(Debug, Clone, Copy)]
pub struct Linear<'a> {
    pub coef: &'a [f64],
}

impl Regularizer for Linear<'_> {
    fn penalty(&self, w: &[f64]) -> f64 {
        w.iter().zip(self.coef).map(|(a, c)| a * c).sum()
    }

    fn add_gradient(&self, _w: &[f64], grad: &mut [f64]) {
        for (g, c) in grad.iter_mut().zip(self.coef) {
            *g += c;
        }
    }
}

/// Diagonal-Fisher penalty against peers, in expanded form:
/// `alpha * sum_i (F_i w_i^2 - 2 G_i w_i)` with `F = sum_j I_j` and
/// `G = sum_j I_j * W_j`. The constant `sum_j I_j W_j^2` is dropped.
#[derive(Debug, Clone, Copy)]
pub struct FisherPenalty<'a> {
    pub fisher_sum: &'a [f64],
    pub weighted_sum: &'a [f64],
    pub alpha: f64,
}

impl Regularizer for FisherPenalty<'_> {
    fn penalty(&self, w: &[f64]) -> f64 {
        self.alpha
            * w.iter()
                .zip(self.fisher_sum)
                .zip(self.weighted_sum)
                .map(|((a, f), g)| f * a * a - 2.0 * g * a)
                .sum::<f64>()
    }

    fn add_gradient(&self, w: &[f64], grad: &mut [f64]) {
        for (((gr, a), f), g) in grad
            .iter_mut()
            .zip(w)
            .zip(self.fisher_sum)
            .zip(self.weighted_sum)
        {
            *gr += 2.0 * self.alpha * (f * a - g);
        }
    }
}

/// One-sided first-order penalty
/// `scale * sum_i U(direction_i * (w_i - center_i))`, `U(x) = max(x, 0)`.
///
/// With `direction = W^{t-2} - W^{t-1}` and `scale = alpha / eta` this
/// penalizes local moves that undo the previous global step. With
/// `direction` set to the server's precomputed global gradient the scale is
/// `alpha`. The gradient is taken as active where the product is exactly 0.
#[derive(Debug, Clone, Copy)]
pub struct FirstOrder<'a> {
    pub center: &'a [f64],
    pub direction: &'a [f64],
    pub scale: f64,
    pub rectified: bool,
}

impl FirstOrder<'_> {
    #[inline]
    fn active(&self, product: f64) -> bool {
        !self.rectified || product >= 0.0
    }
}

impl Regularizer for FirstOrder<'_> {
    fn penalty(&self, w: &[f64]) -> f64 {
        self.scale
            * w.iter()
                .zip(self.center)
                .zip(self.direction)
                .map(|((a, c), d)| {
                    let p = d * (a - c);
                    if self.active(p) {
                        p
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
    }

    fn add_gradient(&self, w: &[f64], grad: &mut [f64]) {
        for (((g, a), c), d) in grad.iter_mut().zip(w).zip(self.center).zip(self.direction) {
            if self.active(d * (a - c)) {
                *g += self.scale * d;
            }
        }
    }
}

/// Rectified first-order penalty of a local model against the last two
/// global models, and its gradient.
pub fn fedfor_reg_term(
    w: &ParamVector,
    prev_global: &ParamVector,
    prev_prev_global: &ParamVector,
    alpha: f64,
    eta: f64,
) -> (f64, ParamVector) {
    let direction: Vec<f64> = prev_prev_global
        .iter()
        .zip(prev_global.iter())
        .map(|(a, b)| a - b)
        .collect();
    let term = FirstOrder {
        center: prev_global,
        direction: &direction,
        scale: alpha / eta,
        rectified: true,
    };
    let mut grad = ParamVector::zeros(w.len());
    term.add_gradient(w, &mut grad);
    (term.penalty(w), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vecn(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn check_fd(reg: &dyn Regularizer, w: &[f64], tol: f64) {
        let w = ParamVector::from_vec(w.to_vec());
        let fd = finite_diff(&w, 1e-5, |p| Ok(reg.penalty(p))).unwrap();
        let mut g = ParamVector::zeros(w.len());
        reg.add_gradient(&w, &mut g);
        let err = g.max_abs_diff(&fd);
        assert!(err < tol, "gradient error {err}");
    }

    #[test]
    fn fedfor_hand_example() {
        let w2 = ParamVector::from_vec(vec![1.0, 0.0]);
        let w1 = ParamVector::from_vec(vec![0.0, 0.0]);
        let w = ParamVector::from_vec(vec![0.5, 0.2]);
        let (pen, grad) = fedfor_reg_term(&w, &w1, &w2, 1.0, 1.0);
        assert_eq!(pen, 0.5);
        assert_eq!(&grad[..], &[1.0, 0.0]);

        // Brute-force coordinate loop.
        let mut pen_bf = 0.0;
        let mut grad_bf = [0.0; 2];
        for i in 0..2 {
            let prod = (w2[i] - w1[i]) * (w[i] - w1[i]);
            if prod >= 0.0 {
                pen_bf += prod;
                grad_bf[i] = w2[i] - w1[i];
            }
        }
        assert_eq!(pen, pen_bf);
        assert_eq!(&grad[..], &grad_bf);
    }

    #[test]
    fn fedfor_boundary_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w1 = ParamVector::from_vec(vecn(&mut rng, 6, 1.0));
        let w2 = ParamVector::from_vec(vecn(&mut rng, 6, 1.0));
        let (alpha, eta) = (5.0, 0.01);

        // At W = W^{t-1} every product is 0 and the gradient is active.
        let (pen, grad) = fedfor_reg_term(&w1, &w1, &w2, alpha, eta);
        assert_eq!(pen, 0.0);
        for i in 0..6 {
            assert_eq!(grad[i], alpha / eta * (w2[i] - w1[i]));
        }

        // No previous global movement: inert.
        let w = ParamVector::from_vec(vecn(&mut rng, 6, 1.0));
        let (pen, grad) = fedfor_reg_term(&w, &w1, &w1, alpha, eta);
        assert_eq!(pen, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = 12;
        for _ in 0..50 {
            let w = vecn(&mut rng, d, 2.0);
            let center = vecn(&mut rng, d, 2.0);
            let alpha = rng.random_range(0.1..5.0);
            check_fd(
                &Proximal {
                    center: &center,
                    alpha,
                },
                &w,
                1e-8,
            );

            let f: Vec<f64> = vecn(&mut rng, d, 1.0).iter().map(|v| v.abs()).collect();
            let g = vecn(&mut rng, d, 1.0);
            check_fd(
                &FisherPenalty {
                    fisher_sum: &f,
                    weighted_sum: &g,
                    alpha,
                },
                &w,
                1e-8,
            );

            let coef = vecn(&mut rng, d, 1.0);
            check_fd(&Linear { coef: &coef }, &w, 1e-8);

            let dir = vecn(&mut rng, d, 1.0);
            let fo = FirstOrder {
                center: &center,
                direction: &dir,
                scale: alpha / 0.01,
                rectified: true,
            };
            let away = w
                .iter()
                .zip(&center)
                .zip(&dir)
                .all(|((a, c), d)| (d * (a - c)).abs() > 1e-8);
            if away {
                check_fd(&fo, &w, 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn fedfor_penalty_nonnegative_and_grad_two_valued(
            w in proptest::collection::vec(-10.0f64..10.0, 8),
            w1 in proptest::collection::vec(-10.0f64..10.0, 8),
            w2 in proptest::collection::vec(-10.0f64..10.0, 8),
            alpha in 0.0f64..10.0,
            eta in 1e-3f64..1.0,
        ) {
            let (w, w1, w2) = (
                ParamVector::from_vec(w),
                ParamVector::from_vec(w1),
                ParamVector::from_vec(w2),
            );
            let (pen, grad) = fedfor_reg_term(&w, &w1, &w2, alpha, eta);
            prop_assert!(pen >= 0.0);
            for i in 0..8 {
                let full = alpha / eta * (w2[i] - w1[i]);
                prop_assert!(grad[i] == 0.0 || grad[i] == full);
            }
        }
    }
}
