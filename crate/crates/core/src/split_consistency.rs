//! Gradient descent on a parameter vector split across two devices.
//!
//! The objective is the strongly convex quadratic `½ wᵀAw − bᵀw`; the first
//! `split` coordinates live on device 1 and the rest on device 2. Each device
//! computes its own block of the gradient and updates its own block, and the
//! result must coincide with unsplit gradient descent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConvergenceError {
    #[error("DimensionMismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("StepSizeOutOfRange: eta={eta} not in (0, {max}]")]
    StepSizeOutOfRange { eta: f64, max: f64 },
    #[error("NotSymmetric: A[{0}][{1}] != A[{1}][{0}]")]
    NotSymmetric(usize, usize),
    #[error("NotPositiveDefinite: smallest eigenvalue {0}")]
    NotPositiveDefinite(f64),
    #[error("InvalidSplit: split index {split} outside 1..{dim}")]
    InvalidSplit { split: usize, dim: usize },
}

type Result<T, E = ConvergenceError> = std::result::Result<T, E>;

/// `½ wᵀAw − bᵀw` with `A` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective<T> {
    dim: usize,
    /// Row-major `dim × dim`.
    a: Vec<T>,
    b: Vec<T>,
    split: usize,
    /// Smallest eigenvalue of `A` (strong convexity constant).
    pub mu_sc: T,
    /// Largest eigenvalue of `A` (gradient Lipschitz constant).
    pub l_lip: T,
    w_star: Vec<T>,
}

impl<T: Scalar> QuadraticObjective<T> {
    /// Builds the objective, measuring the spectrum of `A` and solving for the
    /// minimizer.
    pub fn new(a: Vec<T>, b: Vec<T>, split: usize) -> Result<Self> {
        let dim = b.len();
        if a.len() != dim * dim {
            return Err(ConvergenceError::DimensionMismatch {
                expected: dim * dim,
                got: a.len(),
            });
        }
        if split == 0 || split >= dim {
            return Err(ConvergenceError::InvalidSplit { split, dim });
        }
        for i in 0..dim {
            for j in 0..i {
                if a[i * dim + j] != a[j * dim + i] {
                    return Err(ConvergenceError::NotSymmetric(i, j));
                }
            }
        }
        let m = DMatrix::from_row_slice(dim, dim, &a.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        let eig = m.clone().symmetric_eigenvalues();
        let lo = eig.min();
        let hi = eig.max();
        if lo.is_nan() || lo <= 0.0 {
            return Err(ConvergenceError::NotPositiveDefinite(lo));
        }
        let rhs = DVector::from_iterator(dim, b.iter().map(|v| v.as_f64()));
        let chol = m.cholesky().ok_or(ConvergenceError::NotPositiveDefinite(lo))?;
        let w_star = chol.solve(&rhs).iter().map(|v| T::of(*v)).collect();
        Ok(QuadraticObjective {
            dim,
            a,
            b,
            split,
            mu_sc: T::of(lo),
            l_lip: T::of(hi),
            w_star,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split_index(&self) -> usize {
        self.split
    }

    pub fn minimizer(&self) -> &[T] {
        &self.w_star
    }

    pub fn matrix_entry(&self, i: usize, j: usize) -> T {
        self.a[i * self.dim + j]
    }

    pub fn rhs(&self) -> &[T] {
        &self.b
    }

    fn check_dim(&self, w: &[T]) -> Result<()> {
        if w.len() != self.dim {
            return Err(ConvergenceError::DimensionMismatch {
                expected: self.dim,
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Gradient row `i`: `Σⱼ A[i][j]·w[j] − b[i]`, summed in ascending `j`.
    fn gradient_row(&self, w: &[T], i: usize) -> T {
        let row = &self.a[i * self.dim..(i + 1) * self.dim];
        let mut acc = T::zero();
        for (aij, wj) in row.iter().zip(w) {
            acc = acc + *aij * *wj;
        }
        acc - self.b[i]
    }

    pub fn loss(&self, w: &[T]) -> T {
        let half = T::of(0.5);
        let mut quad = T::zero();
        let mut lin = T::zero();
        for i in 0..self.dim {
            let row = &self.a[i * self.dim..(i + 1) * self.dim];
            let mut aw = T::zero();
            for (aij, wj) in row.iter().zip(w) {
                aw = aw + *aij * *wj;
            }
            quad = quad + w[i] * aw;
            lin = lin + self.b[i] * w[i];
        }
        half * quad - lin
    }

    /// Optimality gap `L(w) − L*`, evaluated as `½ (w−w*)ᵀA(w−w*)` to avoid
    /// cancellation near the optimum.
    pub fn gap(&self, w: &[T]) -> T {
        let e: Vec<T> = w.iter().zip(&self.w_star).map(|(a, b)| *a - *b).collect();
        let mut acc = T::zero();
        for i in 0..self.dim {
            let row = &self.a[i * self.dim..(i + 1) * self.dim];
            let mut ae = T::zero();
            for (aij, ej) in row.iter().zip(&e) {
                ae = ae + *aij * *ej;
            }
            acc = acc + e[i] * ae;
        }
        T::of(0.5) * acc
    }

    /// Largest admissible step, `min(2/μ, 2/L)`.
    pub fn max_step(&self) -> T {
        let two = T::of(2.0);
        (two / self.mu_sc).min(two / self.l_lip)
    }
}

/// Gradient blocks computed independently on each device.
pub fn split_gradient<T: Scalar>(obj: &QuadraticObjective<T>, w: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    obj.check_dim(w)?;
    let g1 = (0..obj.split).map(|i| obj.gradient_row(w, i)).collect();
    let g2 = (obj.split..obj.dim).map(|i| obj.gradient_row(w, i)).collect();
    Ok((g1, g2))
}

/// One descent step with each device updating only its own block.
pub fn split_step<T: Scalar>(obj: &QuadraticObjective<T>, w: &[T], eta: T) -> Result<Vec<T>> {
    let (g1, g2) = split_gradient(obj, w)?;
    let (w1, w2) = w.split_at(obj.split);
    let mut next = Vec::with_capacity(obj.dim);
    next.extend(w1.iter().zip(&g1).map(|(wi, gi)| *wi - eta * *gi));
    next.extend(w2.iter().zip(&g2).map(|(wi, gi)| *wi - eta * *gi));
    Ok(next)
}

/// `−η + (μ/2)·η²`; negative means a guaranteed per-step decrease.
pub fn descent_coefficient<T: Scalar>(eta: T, mu_sc: T) -> T {
    -eta + mu_sc / T::of(2.0) * eta * eta
}

/// Step size used by the convergence lab: `0.9·min(2/μ, 2/L)·(μ/L)`.
pub fn lab_step_size<T: Scalar>(obj: &QuadraticObjective<T>) -> T {
    T::of(0.9) * obj.max_step() * (obj.mu_sc / obj.l_lip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport<T> {
    /// First step `k ≥ 1` where `gap_k > (1 − ημ/2)^k · gap_0`.
    pub violated_at: Option<usize>,
    /// First step where the gap grew.
    pub increased_at: Option<usize>,
    /// `gap_0 ..= gap_K`.
    pub gaps: Vec<T>,
    /// Geometric bound for each step, `bounds[0] = gap_0`.
    pub bounds: Vec<T>,
    /// `gap_{k+1} / gap_k` for `k in 0..K` (0 once the gap reaches 0).
    pub ratios: Vec<T>,
}

/// Runs `steps` split descent steps from `w0`, checking the geometric
/// decrease `gap_k ≤ (1 − ημ/2)^k · gap_0` at every step.
pub fn rate_check<T: Scalar>(obj: &QuadraticObjective<T>, w0: &[T], eta: T, steps: usize) -> Result<RateReport<T>> {
    obj.check_dim(w0)?;
    let max = obj.max_step();
    if !(eta > T::zero() && eta <= max) {
        return Err(ConvergenceError::StepSizeOutOfRange {
            eta: eta.as_f64(),
            max: max.as_f64(),
        });
    }
    let rate = T::one() - eta * obj.mu_sc / T::of(2.0);
    let mut w = w0.to_vec();
    let gap0 = obj.gap(&w);
    let mut gaps = vec![gap0];
    let mut bounds = vec![gap0];
    let mut ratios = Vec::with_capacity(steps);
    let mut violated_at = None;
    let mut increased_at = None;
    let mut bound = gap0;
    for k in 1..=steps {
        w = split_step(obj, &w, eta)?;
        let gap = obj.gap(&w);
        bound = bound * rate;
        let prev = gaps[k - 1];
        ratios.push(if prev > T::zero() { gap / prev } else { T::zero() });
        if violated_at.is_none() && gap > bound {
            violated_at = Some(k);
        }
        if increased_at.is_none() && gap > prev {
            increased_at = Some(k);
        }
        gaps.push(gap);
        bounds.push(bound);
    }
    Ok(RateReport {
        violated_at,
        increased_at,
        gaps,
        bounds,
        ratios,
    })
}

/// Random SPD matrix `QᵀDQ` whose spectrum contains `mu` and `l` exactly (up
/// to rounding) plus `dim − 2` eigenvalues drawn uniformly between them.
pub fn random_spd<R: Rng>(rng: &mut R, dim: usize, mu: f64, l: f64) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let mut spectrum = vec![mu, l];
    spectrum.extend((2..dim).map(|_| rng.random_range(mu..=l)));
    spectrum.truncate(dim);
    let d = DMatrix::from_diagonal(&DVector::from_vec(spectrum));
    let a = &q * d * q.transpose();
    let sym = (&a + a.transpose()) * 0.5;
    let mut out = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            out.push(sym[(i, j)]);
        }
    }
    out
}

/// A seeded random instance and starting point.
pub fn random_instance<T: Scalar>(seed: u64, dim: usize, mu: f64, l: f64) -> Result<(QuadraticObjective<T>, Vec<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_spd(&mut rng, dim, mu, l).into_iter().map(T::of).collect();
    let b = (0..dim).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    let w0 = (0..dim).map(|_| T::of(rng.random_range(-2.0..2.0))).collect();
    Ok((QuadraticObjective::new(a, b, dim / 2)?, w0))
}
