//! Diagonal state-space sequence machinery.
//!
//! A continuous system `h'(t) = A h(t) + B x(t)`, `y(t) = <C, h(t)>` with
//! diagonal `A` is discretized by zero-order hold to per-step coefficients
//! `a_bar = exp(delta * A)` and `b_bar = phi(delta * A) * delta * B`, where
//! `phi(z) = (e^z - 1) / z`. The discrete recurrence is then
//!
//! ```text
//! h_t = a_bar_t (.) h_(t-1) + b_bar_t x_t        y_t = <c_t, h_t>
//! ```
//!
//! [`DiscreteSsm`] runs that recurrence three interchangeable ways --
//! sequentially, as a convolution with the unrolled kernel (time-invariant
//! systems only), and as an associative parallel scan. [`SelectiveSsm`] is
//! the learnable layer used by the model: it derives `delta`, `B` and `C`
//! from the input sequence and runs the scan as a differentiable graph
//! operation.

use rand_chacha::ChaCha8Rng;

use crate::error::{MocError, Result};
use crate::nn::{Graph, Linear, NodeId, ParamId, ParamStore};
use crate::nn::{sc, Scalar, Tensor};

/// Below this magnitude of `z = delta * a`, `phi(z) = (e^z - 1)/z` is
/// replaced by its linear limit to avoid catastrophic cancellation.
pub const PHI_LINEAR_THRESHOLD: f64 = 1e-6;

/// `(e^z - 1) / z`, taking the already-computed `e^z`. Returns the limit 1
/// for tiny `|z|`, which makes `b_bar = delta * b` exactly in that regime.
pub(crate) fn zoh_phi<F: Scalar>(z: F, exp_z: F) -> F {
    if z.abs() < sc(PHI_LINEAR_THRESHOLD) {
        F::one()
    } else {
        (exp_z - F::one()) / z
    }
}

/// Derivative of [`zoh_phi`] with respect to `z`: `(e^z (z - 1) + 1) / z^2`,
/// with its limit 1/2 for tiny `|z|`.
pub(crate) fn zoh_phi_prime<F: Scalar>(z: F, exp_z: F) -> F {
    if z.abs() < sc(PHI_LINEAR_THRESHOLD) {
        sc(0.5)
    } else {
        (exp_z * (z - F::one()) + F::one()) / (z * z)
    }
}

/// Zero-order-hold discretization of diagonal continuous parameters.
///
/// Returns `(a_bar, b_bar)` with `a_bar[i] = exp(delta * a[i])` and
/// `b_bar[i] = phi(delta * a[i]) * delta * b[i]`. The step size must be
/// positive and finite.
pub fn discretize<F: Scalar>(a: &[F], b: &[F], delta: F) -> Result<(Vec<F>, Vec<F>)> {
    if a.len() != b.len() {
        return Err(MocError::Shape(format!(
            "discretize: a has {} entries, b has {}",
            a.len(),
            b.len()
        )));
    }
    if !(delta > F::zero()) || !delta.is_finite() {
        return Err(MocError::Argument(format!("discretize: step size must be positive and finite, got {delta}")));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (&av, &bv) in a.iter().zip(b) {
        let z = delta * av;
        let e = z.exp();
        a_bar.push(e);
        b_bar.push(zoh_phi(z, e) * delta * bv);
    }
    Ok((a_bar, b_bar))
}

/// Running hidden state for chunked or long-horizon recurrent scans.
#[derive(Debug)]
pub struct ScanState<F> {
    h: Vec<F>,
}

impl<F: Scalar> ScanState<F> {
    pub fn new(state_size: usize) -> Self {
        Self { h: vec![F::zero(); state_size] }
    }

    pub fn values(&self) -> &[F] {
        &self.h
    }
}

/// A discretized single-channel system with (possibly) time-varying
/// per-step coefficients, each stored as a flat `[len, state_size]` row per
/// step.
#[derive(Debug)]
pub struct DiscreteSsm<F> {
    a_bar: Vec<F>,
    b_bar: Vec<F>,
    c: Vec<F>,
    state_size: usize,
    len: usize,
}

impl<F: Scalar> DiscreteSsm<F> {
    pub fn new(len: usize, state_size: usize, a_bar: Vec<F>, b_bar: Vec<F>, c: Vec<F>) -> Result<Self> {
        if len == 0 || state_size == 0 {
            return Err(MocError::Argument("DiscreteSsm: length and state size must be positive".into()));
        }
        let want = len * state_size;
        for (label, got) in [("a_bar", a_bar.len()), ("b_bar", b_bar.len()), ("c", c.len())] {
            if got != want {
                return Err(MocError::Shape(format!(
                    "DiscreteSsm: {label} has {got} entries, expected len*state_size = {want}"
                )));
            }
        }
        Ok(Self { a_bar, b_bar, c, state_size, len })
    }

    /// Time-invariant system: one coefficient row, repeated for every step.
    pub fn lti(len: usize, a_bar: &[F], b_bar: &[F], c: &[F]) -> Result<Self> {
        let n = a_bar.len();
        if b_bar.len() != n || c.len() != n {
            return Err(MocError::Shape(format!(
                "lti: rows disagree in length: {} / {} / {}",
                n,
                b_bar.len(),
                c.len()
            )));
        }
        let tile = |row: &[F]| {
            let mut out = Vec::with_capacity(len * n);
            for _ in 0..len {
                out.extend_from_slice(row);
            }
            out
        };
        Self::new(len, n, tile(a_bar), tile(b_bar), tile(c))
    }

    /// Discretizes continuous `(a, b)` with a fixed step and tiles it into a
    /// time-invariant system.
    pub fn from_continuous_lti(len: usize, a: &[F], b: &[F], c: &[F], delta: F) -> Result<Self> {
        let (a_bar, b_bar) = discretize(a, b, delta)?;
        Self::lti(len, &a_bar, &b_bar, c)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    /// True when every step shares the first step's coefficients exactly.
    pub fn is_time_invariant(&self) -> bool {
        let n = self.state_size;
        let same = |flat: &[F]| flat.chunks_exact(n).all(|row| row == &flat[..n]);
        same(&self.a_bar) && same(&self.b_bar) && same(&self.c)
    }

    fn check_input(&self, x: &[F]) -> Result<()> {
        if x.len() != self.len {
            return Err(MocError::Shape(format!(
                "scan input has {} steps, system has {}",
                x.len(),
                self.len
            )));
        }
        Ok(())
    }

    /// Sequential reference evaluation from a zero initial state.
    pub fn scan_recurrent(&self, x: &[F]) -> Result<Vec<F>> {
        let mut state = ScanState::new(self.state_size);
        self.scan_recurrent_with_state(x, &mut state)
    }

    /// Sequential evaluation continuing from (and updating) `state`, so a
    /// long input can be folded through in chunks.
    pub fn scan_recurrent_with_state(&self, x: &[F], state: &mut ScanState<F>) -> Result<Vec<F>> {
        self.check_input(x)?;
        if state.h.len() != self.state_size {
            return Err(MocError::Shape(format!(
                "state has {} entries, system expects {}",
                state.h.len(),
                self.state_size
            )));
        }
        let n = self.state_size;
        let mut y = Vec::with_capacity(self.len);
        for (t, &xv) in x.iter().enumerate() {
            let arow = &self.a_bar[t * n..(t + 1) * n];
            let brow = &self.b_bar[t * n..(t + 1) * n];
            let crow = &self.c[t * n..(t + 1) * n];
            let mut acc = F::zero();
            for ni in 0..n {
                state.h[ni] = arow[ni] * state.h[ni] + brow[ni] * xv;
                acc = acc + crow[ni] * state.h[ni];
            }
            y.push(acc);
        }
        Ok(y)
    }

    /// Unrolled convolution kernel `k[j] = <c, a_bar^j (.) b_bar>`, defined
    /// only for time-invariant systems.
    pub fn kernel(&self) -> Result<Vec<F>> {
        if !self.is_time_invariant() {
            return Err(MocError::State(
                "convolution kernel is only defined for a time-invariant system".into(),
            ));
        }
        let n = self.state_size;
        let (a_bar, b_bar, c) = (&self.a_bar[..n], &self.b_bar[..n], &self.c[..n]);
        let mut pow = vec![F::one(); n];
        let mut k = Vec::with_capacity(self.len);
        for _ in 0..self.len {
            let mut acc = F::zero();
            for ni in 0..n {
                acc = acc + c[ni] * pow[ni] * b_bar[ni];
            }
            k.push(acc);
            for ni in 0..n {
                pow[ni] = pow[ni] * a_bar[ni];
            }
        }
        Ok(k)
    }

    /// Evaluates the system as a causal convolution with the unrolled
    /// kernel. Quadratic in the length; this is a reference path for
    /// cross-checking the scans, not a fast path.
    pub fn scan_kernel_conv(&self, x: &[F]) -> Result<Vec<F>> {
        self.check_input(x)?;
        let k = self.kernel()?;
        let mut y = vec![F::zero(); self.len];
        for (t, yv) in y.iter_mut().enumerate() {
            let mut acc = F::zero();
            for (j, &kv) in k[..=t].iter().enumerate() {
                acc = acc + kv * x[t - j];
            }
            *yv = acc;
        }
        Ok(y)
    }

    /// Evaluates the recurrence as an inclusive associative scan
    /// (Hillis-Steele over the pairs `(a, b*x)` with composition
    /// `(a1, b1) . (a2, b2) = (a1 a2, a2 b1 + b2)`). For a single step this
    /// is bit-identical to the sequential path.
    pub fn scan_parallel(&self, x: &[F]) -> Result<Vec<F>> {
        self.check_input(x)?;
        let n = self.state_size;
        let l = self.len;
        let mut y = vec![F::zero(); l];
        let mut cur: Vec<(F, F)> = Vec::with_capacity(l);
        let mut next: Vec<(F, F)> = vec![(F::zero(), F::zero()); l];
        for ni in 0..n {
            cur.clear();
            for (t, &xv) in x.iter().enumerate() {
                cur.push((self.a_bar[t * n + ni], self.b_bar[t * n + ni] * xv));
            }
            let mut offset = 1;
            while offset < l {
                for t in 0..l {
                    next[t] = if t >= offset {
                        let (a1, b1) = cur[t - offset];
                        let (a2, b2) = cur[t];
                        (a1 * a2, a2 * b1 + b2)
                    } else {
                        cur[t]
                    };
                }
                std::mem::swap(&mut cur, &mut next);
                offset <<= 1;
            }
            for t in 0..l {
                y[t] = y[t] + self.c[t * n + ni] * cur[t].1;
            }
        }
        Ok(y)
    }
}

/// Learnable input-dependent scan layer operating on `[len, d_model]`
/// sequences.
///
/// The step size comes from a softplus-activated linear map of the input,
/// the input and output mixing vectors from two linear maps into the state
/// dimension, and the diagonal state matrix is `A = -exp(a_log)` with
/// `a_log` initialized to `ln(1), ln(2), ..., ln(n)` per channel so the
/// poles start spread over timescales and stay negative under training.
#[derive(Debug)]
pub struct SelectiveSsm {
    a_log: ParamId,
    delta_proj: Linear,
    b_proj: Linear,
    c_proj: Linear,
    d_model: usize,
    state_size: usize,
}

impl SelectiveSsm {
    /// `proj_bias` controls whether the B/C projections carry a bias; the
    /// step-size projection always has one (its bias sets the initial
    /// timescale).
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        state_size: usize,
        proj_bias: bool,
    ) -> Self {
        let a_log = store.add(
            &format!("{name}.a_log"),
            Tensor::from_fn(&[d_model, state_size], |i| sc(((i % state_size + 1) as f64).ln())),
        );
        let delta_proj = Linear::new(store, rng, &format!("{name}.delta_proj"), d_model, d_model, true);
        let b_proj = Linear::new(store, rng, &format!("{name}.b_proj"), d_model, state_size, proj_bias);
        let c_proj = Linear::new(store, rng, &format!("{name}.c_proj"), d_model, state_size, proj_bias);
        Self { a_log, delta_proj, b_proj, c_proj, d_model, state_size }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    /// Output-mixing sequence `C = c_proj(x)`, exposed so callers can add a
    /// context query before the scan.
    pub fn project_c<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        self.c_proj.forward(g, x)
    }

    /// Runs the scan on a `[len, d_model]` sequence.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let c = self.project_c(g, x)?;
        self.forward_with_c(g, x, c)
    }

    /// Runs the scan with a caller-supplied output-mixing sequence (for
    /// example `c_proj(x) + q` with a context query `q`).
    pub fn forward_with_c<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId, c: NodeId) -> Result<NodeId> {
        let pre = self.delta_proj.forward(g, x)?;
        let delta = g.softplus(pre)?;
        let b = self.b_proj.forward(g, x)?;
        let a_log = g.param(self.a_log)?;
        g.selective_scan(x, delta, b, c, a_log)
    }
}
