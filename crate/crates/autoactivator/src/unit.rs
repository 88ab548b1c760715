//! Growing one task's neural unit.
//!
//! A unit is built from scratch by repeatedly drawing batches of random
//! hidden nodes, scoring each batch with the supervisory indicator against
//! the current training residual, and recruiting the batch that reduces the
//! residual most. Output weights are refreshed in closed form through the
//! incremental pseudoinverse ([`crate::linalg`]), so every recruitment
//! leaves the unit at the exact least-squares optimum for its node set.
//! Growth stops on a node budget, on reaching the expected training
//! accuracy, or after a run of rounds in which no candidate qualifies.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{hstack, pinv_extend, pinv_full, weights_extend, Mat, PinvState};
use crate::rng::{derive_seed, substream, TAG_DRAW, TAG_ROUND, TAG_VAL_SPLIT};

pub type Vect = DVector<f64>;

/// Bounded nonconstant activation applied to hidden-node pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
}

impl ActivationKind {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            ActivationKind::Tanh => z.tanh(),
        }
    }

    /// Wire code used in the model file format.
    pub fn code(self) -> u8 {
        match self {
            ActivationKind::Sigmoid => 0,
            ActivationKind::Tanh => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ActivationKind::Sigmoid),
            1 => Some(ActivationKind::Tanh),
            _ => None,
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationKind::Sigmoid => write!(f, "sigmoid"),
            ActivationKind::Tanh => write!(f, "tanh"),
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Knobs controlling the growth of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthConfig {
    /// Nodes generated and recruited per batch (step size).
    pub l: usize,
    /// Random-generation attempts per recruitment round.
    pub t_max: usize,
    /// Residual decrease rate, in (0, 1).
    pub r: f64,
    /// Maximum nodes per unit.
    pub l_max: usize,
    /// Training accuracy at which growth stops.
    pub expected_accuracy: f64,
    /// Random input weights and biases are uniform on [-scope, scope].
    pub scope: f64,
    /// Master seed for this unit's random streams.
    pub seed: u64,
    /// Consecutive empty recruitment rounds that end growth.
    pub stall_limit: usize,
    /// When set, this fraction of samples is held out and growth stops
    /// early once the held-out residual stops improving.
    pub validation_fraction: Option<f64>,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            l: 10,
            t_max: 50,
            r: 0.9,
            l_max: 200,
            expected_accuracy: 0.99,
            scope: 1.0,
            seed: 0,
            stall_limit: 3,
            validation_fraction: None,
        }
    }
}

impl GrowthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::Config("step size l must be positive".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config(format!("r must be in (0,1), got {}", self.r)));
        }
        if self.l > self.l_max {
            return Err(Error::Config(format!(
                "step size l = {} exceeds l_max = {}",
                self.l, self.l_max
            )));
        }
        if !(self.expected_accuracy > 0.0 && self.expected_accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "expected accuracy must be in (0,1], got {}",
                self.expected_accuracy
            )));
        }
        if !(self.scope > 0.0 && self.scope.is_finite()) {
            return Err(Error::Config(format!("scope must be positive, got {}", self.scope)));
        }
        if self.stall_limit == 0 {
            return Err(Error::Config("stall limit must be positive".into()));
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "validation fraction must be in (0,1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// One batch of `l` random nodes under evaluation.
#[derive(Debug, Clone)]
pub struct CandidateBatch {
    /// Input weights, input_dim x l.
    pub w: Mat,
    /// Biases, length l.
    pub b: Vect,
    /// Activations on the training inputs, n x l.
    pub h: Mat,
    /// Candidate output weights fitted to the residual, l x num_classes.
    pub beta: Mat,
    /// Supervisory indicator value (sum over classes).
    pub xi: f64,
    /// Residual squared-norm decrease this batch achieves on its own.
    pub reduction: f64,
}

/// Outcome of one recruitment round.
#[derive(Debug, Clone)]
pub enum RecruitOutcome {
    Accepted(Box<CandidateBatch>),
    NoCandidate,
}

/// Training residual `e = Y - A W` with its squared-norm history.
#[derive(Debug, Clone)]
pub struct ResidualState {
    pub e: Mat,
    pub sq_norm: f64,
    /// Squared norms, one entry at initialization plus one per recruitment.
    pub history: Vec<f64>,
}

impl ResidualState {
    pub fn new(e: Mat) -> Self {
        let sq_norm = e.norm_squared();
        ResidualState { e, sq_norm, history: vec![sq_norm] }
    }

    pub fn update(&mut self, e: Mat) {
        let sq = e.norm_squared();
        debug_assert!(sq <= self.sq_norm + 1e-9 * self.sq_norm.max(1.0));
        self.e = e;
        self.sq_norm = sq;
        self.history.push(sq);
    }
}

/// Why growth of a unit ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// No capacity left for another full batch.
    NodeBudget,
    /// Training accuracy reached `expected_accuracy`.
    AccuracyReached,
    /// `stall_limit` consecutive rounds produced no qualifying candidate.
    Stalled,
    /// Held-out residual stopped improving.
    ValidationStop,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::NodeBudget => write!(f, "node-budget"),
            StopReason::AccuracyReached => write!(f, "accuracy"),
            StopReason::Stalled => write!(f, "stalled"),
            StopReason::ValidationStop => write!(f, "validation"),
        }
    }
}

/// Record of one unit's growth, for diagnostics and property checks.
#[derive(Debug, Clone)]
pub struct GrowthTrace {
    /// Residual squared norm at start and after each recruitment.
    pub residual_history: Vec<f64>,
    /// Node count after each recruitment.
    pub node_counts: Vec<usize>,
    /// Training accuracy after each recruitment.
    pub train_accuracy: Vec<f64>,
    /// Recruitment rounds attempted (including empty ones).
    pub rounds: usize,
    pub stop: StopReason,
}

/// One task's grown sub-network. Frozen (pseudoinverse state dropped,
/// parameters immutable) once its training session ends.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralUnit {
    input_dim: usize,
    num_classes: usize,
    w_in: Mat,
    b: Vect,
    w_out: Mat,
    activation: ActivationKind,
    threshold: f64,
    class_offset: usize,
    pinv_state: Option<PinvState>,
}

impl NeuralUnit {
    fn new(input_dim: usize, num_classes: usize, activation: ActivationKind) -> Self {
        NeuralUnit {
            input_dim,
            num_classes,
            w_in: Mat::zeros(input_dim, 0),
            b: Vect::zeros(0),
            w_out: Mat::zeros(0, num_classes),
            activation,
            threshold: 0.0,
            class_offset: 0,
            pinv_state: Some(PinvState::empty()),
        }
    }

    /// Rebuild a unit from stored parts, validating invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        input_dim: usize,
        num_classes: usize,
        w_in: Mat,
        b: Vect,
        w_out: Mat,
        activation: ActivationKind,
        threshold: f64,
        class_offset: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidInput("unit must have at least one class".into()));
        }
        if w_in.nrows() != input_dim {
            return Err(Error::Dimension(format!(
                "w_in has {} rows, input dim is {input_dim}",
                w_in.nrows()
            )));
        }
        let nodes = w_in.ncols();
        if b.len() != nodes || w_out.nrows() != nodes || w_out.ncols() != num_classes {
            return Err(Error::Dimension(format!(
                "inconsistent unit shapes: w_in {}x{}, b {}, w_out {}x{}",
                w_in.nrows(),
                w_in.ncols(),
                b.len(),
                w_out.nrows(),
                w_out.ncols()
            )));
        }
        let finite = w_in.iter().chain(w_out.iter()).chain(b.iter()).all(|v| v.is_finite());
        if !finite || !threshold.is_finite() {
            return Err(Error::InvalidInput("unit parameters contain non-finite values".into()));
        }
        let alpha = 1.0 / num_classes as f64;
        let (lo, hi) = if num_classes == 1 { (-1.0, 0.0) } else { (0.0, 1.0 - alpha) };
        if threshold < lo - 1e-12 || threshold > hi + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "threshold {threshold} outside [{lo}, {hi}]"
            )));
        }
        Ok(NeuralUnit {
            input_dim,
            num_classes,
            w_in,
            b,
            w_out,
            activation,
            threshold,
            class_offset,
            pinv_state: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn node_count(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn w_in(&self) -> &Mat {
        &self.w_in
    }

    pub fn bias(&self) -> &Vect {
        &self.b
    }

    pub fn w_out(&self) -> &Mat {
        &self.w_out
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    /// Mean over training samples of (highest class probability - alpha).
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Lowest probability triggering a decision, `1 / num_classes`.
    pub fn alpha(&self) -> f64 {
        1.0 / self.num_classes as f64
    }

    /// Index of this unit's first class in the global label space.
    pub fn class_offset(&self) -> usize {
        self.class_offset
    }

    pub(crate) fn set_class_offset(&mut self, offset: usize) {
        self.class_offset = offset;
    }

    /// Drop the training-time pseudoinverse state; the unit's parameters
    /// never change afterwards.
    pub(crate) fn freeze(&mut self) {
        self.pinv_state = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.pinv_state.is_none()
    }

    /// Stored floats: input weights, biases, output weights.
    pub fn param_count(&self) -> usize {
        self.node_count() * (self.input_dim + 1 + self.num_classes)
    }

    /// Class probabilities and the batch confidence statistic
    /// mean(row-max probability - alpha) for a batch of inputs.
    pub fn response(&self, x: &Mat) -> Result<(Mat, f64)> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if x.ncols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "batch has {} columns, unit expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let logits = if self.node_count() == 0 {
            Mat::zeros(x.nrows(), self.num_classes)
        } else {
            activate(x, &self.w_in, &self.b, self.activation)? * &self.w_out
        };
        let probs = output_probabilities(&logits, self.num_classes);
        let alpha = self.alpha();
        let tilde = probs
            .row_iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - alpha)
            .sum::<f64>()
            / probs.nrows() as f64;
        Ok((probs, tilde))
    }
}

/// Hidden-node activations `kind(x w + b)`, applied elementwise.
pub fn activate(x: &Mat, w: &Mat, b: &Vect, kind: ActivationKind) -> Result<Mat> {
    if x.ncols() != w.nrows() {
        return Err(Error::Dimension(format!(
            "inputs have {} columns, weights have {} rows",
            x.ncols(),
            w.nrows()
        )));
    }
    if b.len() != w.ncols() {
        return Err(Error::Dimension(format!("{} biases for {} nodes", b.len(), w.ncols())));
    }
    let mut h = x * w;
    for j in 0..h.ncols() {
        h.column_mut(j).add_scalar_mut(b[j]);
    }
    h.apply(|v| *v = kind.apply(*v));
    Ok(h)
}

/// Least-squares fit of the residual by the candidate activations:
/// `beta = (H^T H)^+ H^T e`, per class.
pub fn candidate_beta(h: &Mat, e: &Mat) -> Result<Mat> {
    if h.nrows() != e.nrows() {
        return Err(Error::Dimension(format!(
            "activations have {} rows, residual has {}",
            h.nrows(),
            e.nrows()
        )));
    }
    let gram = h.tr_mul(h);
    Ok(pinv_full(&gram)? * h.tr_mul(e))
}

/// Supervisory indicator: for each class,
/// `<e_c, (H beta)_c> - (1 - r - mu) <e_c, e_c>`.
///
/// Inner products are finite-sample dot products. A candidate batch is
/// acceptable only when every per-class term is strictly positive; the
/// returned `xi` is their sum.
pub fn supervisory_indicator(
    e: &Mat,
    h: &Mat,
    beta: &Mat,
    r: f64,
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidInput(format!("r must be in (0,1), got {r}")));
    }
    if !(0.0..=1.0 - r).contains(&mu) {
        return Err(Error::InvalidInput(format!("mu must be in [0, 1-r], got {mu}")));
    }
    if h.nrows() != e.nrows() || beta.nrows() != h.ncols() || beta.ncols() != e.ncols() {
        return Err(Error::Dimension(format!(
            "indicator shapes: e {}x{}, h {}x{}, beta {}x{}",
            e.nrows(),
            e.ncols(),
            h.nrows(),
            h.ncols(),
            beta.nrows(),
            beta.ncols()
        )));
    }
    let hb = h * beta;
    let shrink = 1.0 - r - mu;
    let per_class: Vec<f64> = (0..e.ncols())
        .map(|c| {
            let ec = e.column(c);
            ec.dot(&hb.column(c)) - shrink * ec.dot(&ec)
        })
        .collect();
    let xi = per_class.iter().sum();
    Ok((xi, per_class))
}

fn uniform_matrix<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, scope: f64) -> Mat {
    // Entries are drawn in column-major order.
    Mat::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scope..=scope)))
}

/// One recruitment round: draw up to `t_max` candidate batches on
/// independent substreams of `round_seed`, keep those whose per-class
/// inequalities all hold, and return the one with the largest residual
/// reduction (ties resolved toward the earliest draw).
pub fn try_recruit(
    unit: &NeuralUnit,
    resid: &ResidualState,
    x: &Mat,
    cfg: &GrowthConfig,
    round_seed: u64,
) -> Result<RecruitOutcome> {
    debug_assert!(unit.node_count() + cfg.l <= cfg.l_max);
    let input_dim = unit.input_dim;
    // Balance coefficient for the post-recruitment node count.
    let post_nodes = unit.node_count() + cfg.l;
    let mu = (1.0 - cfg.r) / (post_nodes as f64 + 1.0);
    let evaluated: Vec<Result<Option<CandidateBatch>>> = (0..cfg.t_max as u64)
        .into_par_iter()
        .map(|draw| {
            let mut rng = substream(round_seed, &[TAG_DRAW, draw]);
            let w = uniform_matrix(&mut rng, input_dim, cfg.l, cfg.scope);
            let b = Vect::from_iterator(
                cfg.l,
                (0..cfg.l).map(|_| rng.random_range(-cfg.scope..=cfg.scope)),
            );
            let h = activate(x, &w, &b, unit.activation)?;
            let beta = candidate_beta(&h, &resid.e)?;
            let (xi, per_class) = supervisory_indicator(&resid.e, &h, &beta, cfg.r, mu)?;
            if per_class.iter().all(|v| *v > 0.0) {
                let reduction = resid.sq_norm - (&resid.e - &h * &beta).norm_squared();
                Ok(Some(CandidateBatch { w, b, h, beta, xi, reduction }))
            } else {
                Ok(None)
            }
        })
        .collect();
    let mut best: Option<CandidateBatch> = None;
    for item in evaluated {
        if let Some(cand) = item? {
            let better = best.as_ref().is_none_or(|b| cand.reduction > b.reduction);
            if better {
                best = Some(cand);
            }
        }
    }
    Ok(match best {
        Some(cand) => RecruitOutcome::Accepted(Box::new(cand)),
        None => RecruitOutcome::NoCandidate,
    })
}

/// Class probabilities from raw outputs: row softmax, or the elementwise
/// sigmoid when there is a single class (softmax would be constant 1).
pub fn output_probabilities(logits: &Mat, num_classes: usize) -> Mat {
    debug_assert_eq!(logits.ncols(), num_classes);
    if num_classes == 1 {
        return logits.map(|v| 1.0 / (1.0 + (-v).exp()));
    }
    let mut probs = logits.clone();
    for mut row in probs.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Activation threshold over training outputs: the mean over rows of
/// (highest class probability - 1/num_classes).
pub fn compute_activation_threshold(y_hat: &Mat, num_classes: usize) -> Result<f64> {
    if y_hat.nrows() == 0 {
        return Err(Error::InvalidInput("threshold needs at least one sample".into()));
    }
    if num_classes == 0 || y_hat.ncols() != num_classes {
        return Err(Error::Dimension(format!(
            "outputs have {} columns for {num_classes} classes",
            y_hat.ncols()
        )));
    }
    let probs = output_probabilities(y_hat, num_classes);
    let alpha = 1.0 / num_classes as f64;
    let sum: f64 = probs
        .row_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - alpha)
        .sum();
    Ok(sum / y_hat.nrows() as f64)
}

/// Fraction of rows whose predicted class matches the one-hot target. For
/// single-class targets a row counts as correct when its output is >= 0.5.
pub fn classification_accuracy(y_hat: &Mat, y: &Mat) -> f64 {
    debug_assert_eq!(y_hat.shape(), y.shape());
    let n = y.nrows();
    if n == 0 {
        return 0.0;
    }
    let correct = if y.ncols() == 1 {
        (0..n).filter(|&i| (y_hat[(i, 0)] >= 0.5) == (y[(i, 0)] >= 0.5)).count()
    } else {
        (0..n).filter(|&i| row_argmax(y_hat, i) == row_argmax(y, i)).count()
    };
    correct as f64 / n as f64
}

pub(crate) fn row_argmax(m: &Mat, row: usize) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for j in 0..m.ncols() {
        let v = m[(row, j)];
        if v > best_val {
            best_val = v;
            best = j;
        }
    }
    best
}

fn validate_one_hot(y: &Mat) -> Result<()> {
    for i in 0..y.nrows() {
        let mut ones = 0;
        for j in 0..y.ncols() {
            let v = y[(i, j)];
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "targets row {i} is not one-hot (entry {v})"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::InvalidInput(format!(
                "targets row {i} has {ones} ones, expected exactly one"
            )));
        }
    }
    Ok(())
}

struct ValidationState {
    x: Mat,
    y: Mat,
    /// Activations of recruited nodes on the held-out rows.
    a: Mat,
    best: f64,
    bad_steps: usize,
}

/// Grow a unit and return its full growth trace.
pub fn grow_unit_traced(
    x: &Mat,
    y: &Mat,
    cfg: &GrowthConfig,
    kind: ActivationKind,
) -> Result<(NeuralUnit, GrowthTrace)> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidTask("task has no samples".into()));
    }
    if y.nrows() != n {
        return Err(Error::Dimension(format!("{} input rows but {} target rows", n, y.nrows())));
    }
    if y.ncols() == 0 {
        return Err(Error::InvalidTask("task has no classes".into()));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("inputs contain non-finite entries".into()));
    }
    validate_one_hot(y)?;
    // A single sample duplicated under conflicting labels cannot be fit.
    if n >= 2 {
        let all_x_equal = (1..n).all(|i| x.row(i) == x.row(0));
        if all_x_equal && (1..n).any(|i| y.row(i) != y.row(0)) {
            return Err(Error::InvalidTask("all inputs identical but labels differ".into()));
        }
    }

    // Optional held-out fraction for early termination.
    let mut holdout: Option<ValidationState> = None;
    let (x_fit, y_fit) = match cfg.validation_fraction {
        None => (x.clone(), y.clone()),
        Some(frac) => {
            let n_val = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = substream(cfg.seed, &[TAG_VAL_SPLIT]);
            // Fisher-Yates
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let (val_idx, fit_idx) = idx.split_at(n_val);
            let take = |rows: &[usize]| {
                let xs = Mat::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)]);
                let ys = Mat::from_fn(rows.len(), y.ncols(), |i, j| y[(rows[i], j)]);
                (xs, ys)
            };
            let (xv, yv) = take(val_idx);
            holdout = Some(ValidationState {
                a: Mat::zeros(xv.nrows(), 0),
                best: yv.norm_squared(),
                bad_steps: 0,
                x: xv,
                y: yv,
            });
            take(fit_idx)
        }
    };

    let num_classes = y_fit.ncols();
    let mut unit = NeuralUnit::new(x.ncols(), num_classes, kind);
    let mut resid = ResidualState::new(y_fit.clone());
    let mut trace = GrowthTrace {
        residual_history: Vec::new(),
        node_counts: Vec::new(),
        train_accuracy: Vec::new(),
        rounds: 0,
        stop: StopReason::NodeBudget,
    };
    let mut stall = 0usize;
    let mut last_y_hat: Option<Mat> = None;

    loop {
        if unit.node_count() + cfg.l > cfg.l_max {
            trace.stop = StopReason::NodeBudget;
            break;
        }
        let round_seed = derive_seed(cfg.seed, &[TAG_ROUND, trace.rounds as u64]);
        trace.rounds += 1;
        match try_recruit(&unit, &resid, &x_fit, cfg, round_seed)? {
            RecruitOutcome::NoCandidate => {
                stall += 1;
                if stall >= cfg.stall_limit {
                    trace.stop = StopReason::Stalled;
                    break;
                }
            }
            RecruitOutcome::Accepted(cand) => {
                stall = 0;
                let state = unit.pinv_state.take().expect("growing unit has pinv state");
                let w_out = weights_extend(&unit.w_out, &state, &cand.h, &y_fit)?;
                let state = pinv_extend(&state, &cand.h)?;
                unit.w_in = hstack(&unit.w_in, &cand.w);
                unit.b = Vect::from_iterator(
                    unit.b.len() + cand.b.len(),
                    unit.b.iter().chain(cand.b.iter()).cloned(),
                );
                unit.w_out = w_out;
                let y_hat = state.a() * &unit.w_out;
                unit.pinv_state = Some(state);
                resid.update(&y_fit - &y_hat);
                trace.node_counts.push(unit.node_count());
                let acc = classification_accuracy(&y_hat, &y_fit);
                trace.train_accuracy.push(acc);
                last_y_hat = Some(y_hat);
                if acc >= cfg.expected_accuracy {
                    trace.stop = StopReason::AccuracyReached;
                    break;
                }
                if let Some(v) = &mut holdout {
                    let h_val = activate(&v.x, &cand.w, &cand.b, kind)?;
                    v.a = hstack(&v.a, &h_val);
                    let val_resid = (&v.y - &v.a * &unit.w_out).norm_squared();
                    if val_resid < v.best {
                        v.best = val_resid;
                        v.bad_steps = 0;
                    } else {
                        v.bad_steps += 1;
                        if v.bad_steps >= cfg.stall_limit {
                            trace.stop = StopReason::ValidationStop;
                            break;
                        }
                    }
                }
            }
        }
    }

    let y_hat = match last_y_hat {
        Some(m) => m,
        None => Mat::zeros(y_fit.nrows(), num_classes),
    };
    unit.threshold = compute_activation_threshold(&y_hat, num_classes)?;
    trace.residual_history = resid.history.clone();
    Ok((unit, trace))
}

/// Grow a unit, discarding the trace.
pub fn grow_unit(x: &Mat, y: &Mat, cfg: &GrowthConfig, kind: ActivationKind) -> Result<NeuralUnit> {
    Ok(grow_unit_traced(x, y, cfg, kind)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = substream(seed, &[rows as u64, cols as u64]);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
    }

    #[test]
    fn activate_zero_preactivation() {
        // x w + b = 0 everywhere: sigmoid gives 0.5, tanh gives 0.
        let x = random_mat(3, 2, 1);
        let w = Mat::zeros(2, 4);
        let b = Vect::zeros(4);
        let h = activate(&x, &w, &b, ActivationKind::Sigmoid).unwrap();
        assert!(h.iter().all(|&v| v == 0.5));
        let h = activate(&x, &w, &b, ActivationKind::Tanh).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activate_matches_scalar_loop() {
        let x = random_mat(2, 2, 3);
        let w = random_mat(2, 2, 5);
        let b = Vect::from_column_slice(&[0.3, -0.7]);
        let h = activate(&x, &w, &b, ActivationKind::Sigmoid).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut z = b[j];
                for k in 0..2 {
                    z += x[(i, k)] * w[(k, j)];
                }
                let want = 1.0 / (1.0 + (-z).exp());
                assert!((h[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activate_rejects_mismatched_shapes() {
        let x = random_mat(3, 2, 7);
        let w = random_mat(3, 2, 9);
        let b = Vect::zeros(2);
        assert!(matches!(
            activate(&x, &w, &b, ActivationKind::Sigmoid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn candidate_beta_zero_residual_gives_zero() {
        let h = random_mat(5, 2, 11);
        let e = Mat::zeros(5, 3);
        let beta = candidate_beta(&h, &e).unwrap();
        assert!(beta.norm() < 1e-14);
    }

    #[test]
    fn candidate_beta_orthonormal_activations() {
        let h = random_mat(6, 3, 13).qr().q();
        let e = random_mat(6, 2, 15);
        let beta = candidate_beta(&h, &e).unwrap();
        let want = h.tr_mul(&e);
        assert!((beta - want).norm() < 1e-10);
    }

    #[test]
    fn candidate_beta_matches_pinv_oracle() {
        let h = random_mat(5, 2, 17);
        let e = random_mat(5, 2, 19);
        let beta = candidate_beta(&h, &e).unwrap();
        let want = pinv_full(&h).unwrap() * &e;
        assert!((beta - want).norm() < 1e-10);
    }

    #[test]
    fn indicator_zero_residual_is_rejected() {
        let e = Mat::zeros(4, 2);
        let h = random_mat(4, 2, 21);
        let beta = candidate_beta(&h, &e).unwrap();
        let (xi, per_class) = supervisory_indicator(&e, &h, &beta, 0.9, 0.05).unwrap();
        assert_eq!(xi, 0.0);
        assert!(!per_class.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn indicator_perfect_fit_is_accepted() {
        // h beta = e exactly: per-class value is (r + mu) * ||e_c||^2.
        let e = random_mat(5, 2, 23);
        let h = e.clone();
        let beta = Mat::identity(2, 2);
        let (r, mu) = (0.9, 0.05);
        let (_, per_class) = supervisory_indicator(&e, &h, &beta, r, mu).unwrap();
        for (c, v) in per_class.iter().enumerate() {
            let want = (r + mu) * e.column(c).norm_squared();
            assert!((v - want).abs() < 1e-12);
            assert!(*v > 0.0);
        }
    }

    #[test]
    fn indicator_matches_scalar_oracle() {
        let e = random_mat(4, 2, 25);
        let h = random_mat(4, 3, 27);
        let beta = random_mat(3, 2, 29);
        let (r, mu) = (0.8, 0.1);
        let (xi, per_class) = supervisory_indicator(&e, &h, &beta, r, mu).unwrap();
        let mut want_xi = 0.0;
        for c in 0..2 {
            let mut dot_ehb = 0.0;
            let mut dot_ee = 0.0;
            for i in 0..4 {
                let mut hb = 0.0;
                for k in 0..3 {
                    hb += h[(i, k)] * beta[(k, c)];
                }
                dot_ehb += e[(i, c)] * hb;
                dot_ee += e[(i, c)] * e[(i, c)];
            }
            let want = dot_ehb - (1.0 - r - mu) * dot_ee;
            assert!((per_class[c] - want).abs() < 1e-12);
            want_xi += want;
        }
        assert!((xi - want_xi).abs() < 1e-12);
    }

    #[test]
    fn indicator_rejects_bad_parameters() {
        let e = random_mat(3, 1, 31);
        let h = random_mat(3, 1, 33);
        let beta = candidate_beta(&h, &e).unwrap();
        assert!(supervisory_indicator(&e, &h, &beta, 1.5, 0.0).is_err());
        assert!(supervisory_indicator(&e, &h, &beta, 0.9, 0.5).is_err());
    }

    fn blob_task(seed: u64, n_per: usize) -> (Mat, Mat) {
        // Two well-separated gaussian-ish blobs in 2-D.
        let mut rng = substream(seed, &[77]);
        let n = 2 * n_per;
        let mut x = Mat::zeros(n, 2);
        let mut y = Mat::zeros(n, 2);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { (-1.0, -1.0) } else { (1.0, 1.0) };
            x[(i, 0)] = center.0 + 0.3 * rng.random_range(-1.0..=1.0);
            x[(i, 1)] = center.1 + 0.3 * rng.random_range(-1.0..=1.0);
            y[(i, class)] = 1.0;
        }
        (x, y)
    }

    #[test]
    fn recruit_zero_residual_yields_no_candidate() {
        let (x, y) = blob_task(1, 10);
        let unit = NeuralUnit::new(2, 2, ActivationKind::Sigmoid);
        let resid = ResidualState::new(Mat::zeros(y.nrows(), 2));
        let cfg = GrowthConfig { l: 2, t_max: 5, ..GrowthConfig::default() };
        let out = try_recruit(&unit, &resid, &x, &cfg, 99).unwrap();
        assert!(matches!(out, RecruitOutcome::NoCandidate));
    }

    #[test]
    fn recruit_reproduces_seeded_draw() {
        let (x, y) = blob_task(2, 20);
        let unit = NeuralUnit::new(2, 2, ActivationKind::Sigmoid);
        let resid = ResidualState::new(y.clone());
        let cfg = GrowthConfig { l: 2, t_max: 1, ..GrowthConfig::default() };
        let round_seed = 1234;
        match try_recruit(&unit, &resid, &x, &cfg, round_seed).unwrap() {
            RecruitOutcome::Accepted(cand) => {
                assert!(cand.reduction > 0.0);
                // Re-simulate draw 0 and check the batch is bit-identical.
                let mut rng = substream(round_seed, &[TAG_DRAW, 0]);
                let w = uniform_matrix(&mut rng, 2, 2, cfg.scope);
                let b = Vect::from_iterator(2, (0..2).map(|_| rng.random_range(-1.0f64..=1.0)));
                assert_eq!(cand.w, w);
                assert_eq!(cand.b, b);
                let h = activate(&x, &w, &b, ActivationKind::Sigmoid).unwrap();
                let beta = candidate_beta(&h, &resid.e).unwrap();
                let reduction = resid.sq_norm - (&resid.e - &h * &beta).norm_squared();
                assert_eq!(cand.reduction, reduction);
            }
            RecruitOutcome::NoCandidate => panic!("seeded draw should qualify"),
        }
    }

    #[test]
    fn recruit_selects_larger_reduction() {
        let (x, y) = blob_task(3, 20);
        let unit = NeuralUnit::new(2, 2, ActivationKind::Sigmoid);
        let resid = ResidualState::new(y.clone());
        let cfg = GrowthConfig { l: 2, t_max: 2, ..GrowthConfig::default() };
        let round_seed = 555;
        // Evaluate both draws exhaustively by re-simulation.
        let mut best: Option<(usize, f64, Mat)> = None;
        for draw in 0..2u64 {
            let mut rng = substream(round_seed, &[TAG_DRAW, draw]);
            let w = uniform_matrix(&mut rng, 2, 2, cfg.scope);
            let b = Vect::from_iterator(2, (0..2).map(|_| rng.random_range(-1.0f64..=1.0)));
            let h = activate(&x, &w, &b, ActivationKind::Sigmoid).unwrap();
            let beta = candidate_beta(&h, &resid.e).unwrap();
            let mu = (1.0 - cfg.r) / (cfg.l as f64 + 1.0);
            let (_, pc) = supervisory_indicator(&resid.e, &h, &beta, cfg.r, mu).unwrap();
            if pc.iter().all(|v| *v > 0.0) {
                let red = resid.sq_norm - (&resid.e - &h * &beta).norm_squared();
                if best.as_ref().is_none_or(|(_, r, _)| red > *r) {
                    best = Some((draw as usize, red, w));
                }
            }
        }
        let want = best.expect("at least one draw qualifies on fresh blobs");
        match try_recruit(&unit, &resid, &x, &cfg, round_seed).unwrap() {
            RecruitOutcome::Accepted(cand) => {
                assert_eq!(cand.reduction, want.1);
                assert_eq!(cand.w, want.2);
            }
            RecruitOutcome::NoCandidate => panic!("expected acceptance"),
        }
    }

    #[test]
    fn grow_separable_blobs() {
        let (x, y) = blob_task(4, 40);
        let cfg = GrowthConfig {
            l: 2,
            t_max: 10,
            expected_accuracy: 0.9,
            l_max: 60,
            seed: 7,
            ..GrowthConfig::default()
        };
        let (unit, trace) = grow_unit_traced(&x, &y, &cfg, ActivationKind::Sigmoid).unwrap();
        assert!(unit.node_count() >= cfg.l);
        assert!(*trace.train_accuracy.last().unwrap() >= 0.9);
        // Residual history never increases.
        for w in trace.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn grow_xor_to_perfect_accuracy() {
        let x = Mat::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let y = Mat::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let cfg = GrowthConfig {
            l: 2,
            t_max: 50,
            l_max: 50,
            expected_accuracy: 1.0,
            seed: 11,
            ..GrowthConfig::default()
        };
        let (unit, trace) = grow_unit_traced(&x, &y, &cfg, ActivationKind::Sigmoid).unwrap();
        assert_eq!(trace.stop, StopReason::AccuracyReached);
        assert_eq!(*trace.train_accuracy.last().unwrap(), 1.0);
        // Strictly decreasing at every accepted step.
        for w in trace.residual_history.windows(2) {
            assert!(w[1] < w[0]);
        }
        // Scalar forward-pass oracle over all four points.
        for i in 0..4 {
            let mut logits = [0.0f64; 2];
            for (c, logit) in logits.iter_mut().enumerate() {
                for node in 0..unit.node_count() {
                    let mut z = unit.bias()[node];
                    for k in 0..2 {
                        z += x[(i, k)] * unit.w_in()[(k, node)];
                    }
                    let g = 1.0 / (1.0 + (-z).exp());
                    *logit += g * unit.w_out()[(node, c)];
                }
            }
            let pred = if logits[1] > logits[0] { 1 } else { 0 };
            let truth = if y[(i, 1)] > y[(i, 0)] { 1 } else { 0 };
            assert_eq!(pred, truth, "point {i} misclassified");
        }
    }

    #[test]
    fn growth_is_deterministic() {
        let (x, y) = blob_task(5, 30);
        let cfg = GrowthConfig { l: 3, t_max: 8, l_max: 30, seed: 99, ..GrowthConfig::default() };
        let (u1, _) = grow_unit_traced(&x, &y, &cfg, ActivationKind::Tanh).unwrap();
        let (u2, _) = grow_unit_traced(&x, &y, &cfg, ActivationKind::Tanh).unwrap();
        assert_eq!(u1, u2);
    }

    #[test]
    fn accepted_steps_satisfy_decay_bound() {
        // Every accepted recruitment obeys ||e_L||^2 <= (r + mu_L) ||e_{L-l}||^2.
        for seed in 0..5u64 {
            let (x, y) = blob_task(100 + seed, 25);
            let cfg =
                GrowthConfig { l: 2, t_max: 10, l_max: 40, seed, ..GrowthConfig::default() };
            let (_, trace) = grow_unit_traced(&x, &y, &cfg, ActivationKind::Sigmoid).unwrap();
            for (k, w) in trace.residual_history.windows(2).enumerate() {
                let nodes = trace.node_counts[k];
                let mu = (1.0 - cfg.r) / (nodes as f64 + 1.0);
                assert!(
                    w[1] <= (cfg.r + mu) * w[0] + 1e-9,
                    "step {k}: {} > {} * {}",
                    w[1],
                    cfg.r + mu,
                    w[0]
                );
            }
        }
    }

    #[test]
    fn grow_rejects_degenerate_tasks() {
        let x = Mat::zeros(0, 2);
        let y = Mat::zeros(0, 2);
        let cfg = GrowthConfig::default();
        assert!(matches!(
            grow_unit(&x, &y, &cfg, ActivationKind::Sigmoid),
            Err(Error::InvalidTask(_))
        ));
        // Same input row duplicated with conflicting labels.
        let x = Mat::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let y = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            grow_unit(&x, &y, &cfg, ActivationKind::Sigmoid),
            Err(Error::InvalidTask(_))
        ));
    }

    #[test]
    fn threshold_uniform_logits_is_zero() {
        let y_hat = Mat::from_element(4, 2, 1.3);
        let t = compute_activation_threshold(&y_hat, 2).unwrap();
        assert!(t.abs() < 1e-12);
    }

    #[test]
    fn threshold_saturated_logits_near_half() {
        let y_hat = Mat::from_row_slice(1, 2, &[1000.0, -1000.0]);
        let t = compute_activation_threshold(&y_hat, 2).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_matches_scalar_softmax_oracle() {
        let y_hat = Mat::from_row_slice(3, 2, &[0.2, -0.4, 1.5, 0.1, -2.0, 0.3]);
        let t = compute_activation_threshold(&y_hat, 2).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            let (a, b) = (y_hat[(i, 0)], y_hat[(i, 1)]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let pmax = ea.max(eb) / (ea + eb);
            want += pmax - 0.5;
        }
        want /= 3.0;
        assert!((t - want).abs() < 1e-12);
    }

    #[test]
    fn threshold_rejects_empty_input() {
        assert!(compute_activation_threshold(&Mat::zeros(0, 2), 2).is_err());
    }

    #[test]
    fn threshold_stays_in_bounds() {
        for seed in 0..10 {
            let y_hat = random_mat(6, 3, 200 + seed).scale(5.0);
            let t = compute_activation_threshold(&y_hat, 3).unwrap();
            assert!((0.0..=1.0 - 1.0 / 3.0).contains(&t));
        }
    }

    #[test]
    fn argmax_invariant_to_row_shifts() {
        for seed in 0..10 {
            let logits = random_mat(5, 4, 300 + seed).scale(3.0);
            let probs = output_probabilities(&logits, 4);
            let mut shifted = logits.clone();
            for (i, mut row) in shifted.row_iter_mut().enumerate() {
                let c = (i as f64 - 2.0) * 10.0;
                for v in row.iter_mut() {
                    *v += c;
                }
            }
            let probs_shifted = output_probabilities(&shifted, 4);
            for i in 0..5 {
                assert_eq!(row_argmax(&probs, i), row_argmax(&probs_shifted, i));
            }
        }
    }

    #[test]
    fn single_class_probabilities_use_sigmoid() {
        let logits = Mat::from_row_slice(2, 1, &[2.0, -2.0]);
        let probs = output_probabilities(&logits, 1);
        assert!((probs[(0, 0)] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!((probs[(1, 0)] - 1.0 / (1.0 + (2.0f64).exp())).abs() < 1e-12);
    }
}
