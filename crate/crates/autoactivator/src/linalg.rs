//! Dense linear-algebra kernel: Moore-Penrose pseudoinverse, least squares,
//! and the partitioned-matrix incremental pseudoinverse update applied every
//! time a node batch is appended to a design matrix.
//!
//! All arithmetic is 64-bit. Operations are pure functions of their inputs;
//! [`PinvState`] is an immutable value and extension returns a new state.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense column-major matrix of 64-bit reals.
pub type Mat = DMatrix<f64>;

fn check_finite(a: &Mat, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite entries")))
    }
}

/// Stack two matrices side by side: `[a | b]`.
pub fn hstack(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// Stack two matrices on top of each other: `[a; b]`.
pub fn vstack(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.ncols(), b.ncols());
    let mut out = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

/// One-sided Jacobi orthogonalization of the columns of `a` (rows >= cols).
///
/// On return `u`'s columns are pairwise orthogonal (column i holds
/// `sigma_i * u_i`) and `v` accumulates the rotations, so `a = u * v^T`.
fn jacobi_orthogonalize(a: &Mat) -> (Mat, Mat) {
    let n = a.ncols();
    let mut u = a.clone();
    let mut v = Mat::identity(n, n);
    // Cached squared column norms, updated after every rotation.
    let mut sq: Vec<f64> = (0..n).map(|j| u.column(j).norm_squared()).collect();
    const TOL: f64 = 1e-14;
    const MAX_SWEEPS: usize = 60;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let alpha = sq[i];
                let beta = sq[j];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = u.column(i).dot(&u.column(j));
                if gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    let (mut ci, mut cj) = m.columns_range_pair_mut(i, j);
                    for (vi, vj) in ci.iter_mut().zip(cj.iter_mut()) {
                        let a0 = *vi;
                        let b0 = *vj;
                        *vi = c * a0 - s * b0;
                        *vj = s * a0 + c * b0;
                    }
                }
                sq[i] = u.column(i).norm_squared();
                sq[j] = u.column(j).norm_squared();
            }
        }
        if !rotated {
            break;
        }
    }
    (u, v)
}

/// Pseudoinverse with a caller-supplied absolute noise floor: singular
/// values below `max(standard cutoff, floor)` are treated as zero. Returns
/// the numerical rank alongside.
fn pinv_with_floor(a: &Mat, floor: f64) -> Result<(Mat, usize)> {
    check_finite(a, "pinv_full input")?;
    let (n, m) = a.shape();
    if n == 0 || m == 0 {
        return Ok((Mat::zeros(m, n), 0));
    }
    // Orthogonalize the short side: pinv(A) = pinv(A^T)^T.
    if m > n {
        let (p, rank) = pinv_with_floor(&a.transpose(), floor)?;
        return Ok((p.transpose(), rank));
    }
    let (mut u, v) = jacobi_orthogonalize(a);
    let sigmas: Vec<f64> = (0..m).map(|j| u.column(j).norm()).collect();
    let sigma_max = sigmas.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = ((n.max(m) as f64) * sigma_max * f64::EPSILON).max(floor);
    // pinv = sum_i v_i u_i^T / sigma_i^2 over retained singular values,
    // since column i of u is sigma_i * u_i.
    let mut rank = 0;
    for (j, &s) in sigmas.iter().enumerate() {
        let scale = if s > cutoff {
            rank += 1;
            1.0 / (s * s)
        } else {
            0.0
        };
        u.column_mut(j).scale_mut(scale);
    }
    let p = v * u.transpose();
    check_finite(&p, "pseudoinverse")?;
    Ok((p, rank))
}

/// Moore-Penrose pseudoinverse via one-sided Jacobi SVD.
///
/// Singular values below `max(rows, cols) * sigma_max * f64::EPSILON` are
/// treated as zero, the standard numerically robust rank cutoff.
pub fn pinv_full(a: &Mat) -> Result<Mat> {
    Ok(pinv_with_floor(a, 0.0)?.0)
}

/// A design matrix together with its pseudoinverse, kept in sync as node
/// batches are appended.
#[derive(Debug, Clone, PartialEq)]
pub struct PinvState {
    a: Mat,
    a_pinv: Mat,
}

impl PinvState {
    /// State with zero columns; the row count is fixed by the first extension.
    pub fn empty() -> Self {
        PinvState { a: Mat::zeros(0, 0), a_pinv: Mat::zeros(0, 0) }
    }

    pub fn is_empty(&self) -> bool {
        self.a.ncols() == 0
    }

    /// Number of columns accumulated so far.
    pub fn ncols(&self) -> usize {
        self.a.ncols()
    }

    /// The design matrix `A` (rows = samples, cols = nodes).
    pub fn a(&self) -> &Mat {
        &self.a
    }

    /// The pseudoinverse of `A`.
    pub fn a_pinv(&self) -> &Mat {
        &self.a_pinv
    }
}

/// Relative tolerance under which the residual block `C = G - A D` is
/// treated as exactly zero when choosing the update branch.
const C_ZERO_RTOL: f64 = 1e-10;

/// Intermediate blocks of the partitioned-matrix update: `D = A^+ G` and
/// `B^T`, which is `C^+` when `C = G - A D` is numerically nonzero and
/// `(D^T D + I)^-1 D^T A^+` otherwise.
///
/// `Mixed` signals that `C` is neither zero nor of full column rank — a
/// block that straddles rank saturation. The closed-form block update is
/// not exact there, so callers fall back to column-by-column updates.
enum ExtensionBlocks {
    Blocks { d: Mat, bt: Mat },
    Mixed,
}

fn extension_blocks(state: &PinvState, g: &Mat) -> Result<ExtensionBlocks> {
    let d = state.a_pinv() * g;
    let c = g - state.a() * &d;
    check_finite(&c, "extension residual block")?;
    // Forming C cancels range(A) components of G, so its float residue is
    // bounded by eps * (1 + |A| |A^+|) * |G|. Directions below that floor
    // are indistinguishable from roundoff and must not be inverted.
    let kappa = state.a().norm() * state.a_pinv().norm();
    let noise_floor = 100.0 * f64::EPSILON * (1.0 + kappa) * g.norm();
    let c_is_zero = c.norm() <= (C_ZERO_RTOL * g.norm().max(1.0)).max(noise_floor);
    let bt = if c_is_zero {
        let l = d.ncols();
        let m = d.tr_mul(&d) + Mat::identity(l, l);
        let rhs = d.transpose() * state.a_pinv();
        m.cholesky()
            .ok_or_else(|| Error::Numerical("D^T D + I not positive definite".into()))?
            .solve(&rhs)
    } else {
        let (c_pinv, rank) = pinv_with_floor(&c, noise_floor)?;
        if rank < c.ncols() {
            return Ok(ExtensionBlocks::Mixed);
        }
        c_pinv
    };
    check_finite(&bt, "extension block B^T")?;
    Ok(ExtensionBlocks::Blocks { d, bt })
}

/// Extend the pseudoinverse state by a new column block `g`, producing the
/// state for `[A | G]` without recomputing the full decomposition.
///
/// Extending an empty state computes `pinv_full(g)` directly. A block whose
/// novel part `C` is rank-deficient but nonzero is appended one column at a
/// time, where the zero/nonzero dichotomy is exhaustive and the update
/// stays exact.
pub fn pinv_extend(state: &PinvState, g: &Mat) -> Result<PinvState> {
    check_finite(g, "new column block")?;
    if state.is_empty() {
        return Ok(PinvState { a: g.clone(), a_pinv: pinv_full(g)? });
    }
    if g.nrows() != state.a().nrows() {
        return Err(Error::Dimension(format!(
            "column block has {} rows, design matrix has {}",
            g.nrows(),
            state.a().nrows()
        )));
    }
    match extension_blocks(state, g)? {
        ExtensionBlocks::Blocks { d, bt } => {
            let upper = state.a_pinv() - &d * &bt;
            Ok(PinvState { a: hstack(state.a(), g), a_pinv: vstack(&upper, &bt) })
        }
        ExtensionBlocks::Mixed => {
            let mut st = state.clone();
            for j in 0..g.ncols() {
                let col = g.columns(j, 1).into_owned();
                st = pinv_extend(&st, &col)?;
            }
            Ok(st)
        }
    }
}

/// Stepwise update of least-squares output weights when the design matrix
/// grows by a column block: `W' = [W - D B^T Y ; B^T Y]`.
///
/// `w` must be the least-squares solution for the current `state`; the
/// result is then the least-squares solution for `[A | G]`.
pub fn weights_extend(w: &Mat, state: &PinvState, g: &Mat, y: &Mat) -> Result<Mat> {
    check_finite(g, "new column block")?;
    check_finite(y, "targets")?;
    if g.nrows() != y.nrows() {
        return Err(Error::Dimension(format!(
            "column block has {} rows, targets have {}",
            g.nrows(),
            y.nrows()
        )));
    }
    if state.is_empty() {
        return Ok(pinv_full(g)? * y);
    }
    if state.a().nrows() != g.nrows() {
        return Err(Error::Dimension(format!(
            "column block has {} rows, design matrix has {}",
            g.nrows(),
            state.a().nrows()
        )));
    }
    if w.nrows() != state.ncols() || w.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "weights are {}x{}, expected {}x{}",
            w.nrows(),
            w.ncols(),
            state.ncols(),
            y.ncols()
        )));
    }
    match extension_blocks(state, g)? {
        ExtensionBlocks::Blocks { d, bt } => {
            let bty = &bt * y;
            let upper = w - &d * &bty;
            Ok(vstack(&upper, &bty))
        }
        // Rank-straddling block: rebuild from the extended pseudoinverse.
        ExtensionBlocks::Mixed => Ok(pinv_extend(state, g)?.a_pinv() * y),
    }
}

/// Least-squares solve `w = A^+ y` with the squared Frobenius residual
/// `||A w - y||_F^2`.
pub fn lstsq_residual(a: &Mat, y: &Mat) -> Result<(Mat, f64)> {
    check_finite(a, "design matrix")?;
    check_finite(y, "targets")?;
    if a.nrows() != y.nrows() {
        return Err(Error::Dimension(format!(
            "design matrix has {} rows, targets have {}",
            a.nrows(),
            y.nrows()
        )));
    }
    let w = pinv_full(a)? * y;
    let resid = (a * &w - y).norm_squared();
    Ok((w, resid))
}
