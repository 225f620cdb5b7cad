//! α-entmax activations and their Fenchel-Young losses.
//!
//! For logits `z` and `1 <= α <= 2`, α-entmax maps `z` to the point of the
//! probability simplex maximizing `pᵀz + H_α(p)`, where `H_α` is the Tsallis
//! α-entropy. Away from the softmax end it has the closed threshold form
//!
//! ```text
//! entmax(z)_i = [(α - 1) z_i - η]_+ ^ (1 / (α - 1))
//! ```
//!
//! with a unique `η` making the output sum to one. `α = 1` is softmax and
//! `α = 2` is sparsemax (Euclidean projection onto the simplex).
//!
//! Solvers:
//!
//! | α        | method                                  | cost        |
//! |----------|-----------------------------------------|-------------|
//! | 1        | stable softmax                          | O(n)        |
//! | 1.5      | sort + closed-form quadratic threshold  | O(n log n)  |
//! | 2        | sort + cumulative-sum threshold         | O(n log n)  |
//! | other    | bisection on η                          | O(n · iter) |
//!
//! The sort-based solvers only sort the entries within 1 of the maximum
//! (after the `(α - 1)` scaling); anything below that is provably outside the
//! support. All kernels run in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BISECT_MAX_ITER: usize = 100;
const BISECT_TOL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// Entmax shape parameter, restricted to `[1, 2]`. Deserializes from a
/// number or one of the names accepted by [`Alpha::parse`].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "f64")]
pub struct Alpha(f64);

#[derive(Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Number(f64),
    Name(String),
}

impl TryFrom<AlphaRepr> for Alpha {
    type Error = Error;

    fn try_from(r: AlphaRepr) -> Result<Self> {
        match r {
            AlphaRepr::Number(v) => Alpha::new(v),
            AlphaRepr::Name(s) => Alpha::parse(&s),
        }
    }
}

impl Alpha {
    pub const SOFTMAX: Alpha = Alpha(1.0);
    pub const ENTMAX15: Alpha = Alpha(1.5);
    pub const SPARSEMAX: Alpha = Alpha(2.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(1.0..=2.0).contains(&value) {
            return Err(Error::InvalidAlpha(value));
        }
        Ok(Alpha(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_softmax(self) -> bool {
        self.0 == 1.0
    }

    /// Short name used in configs and logs.
    pub fn name(self) -> String {
        match self.0 {
            v if v == 1.0 => "softmax".into(),
            v if v == 1.5 => "entmax15".into(),
            v if v == 2.0 => "sparsemax".into(),
            v => format!("entmax{v}"),
        }
    }

    /// Parses `softmax`, `entmax15`, `sparsemax`, or a bare number.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::SOFTMAX),
            "entmax15" | "entmax" => Ok(Self::ENTMAX15),
            "sparsemax" => Ok(Self::SPARSEMAX),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("unknown alpha `{other}`")))
                .and_then(Alpha::new),
        }
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Alpha::new(v)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

/// Unnormalized scores; finite by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(LogitVector(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates non-negativity and unit sum (within 1e-9).
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProbability(format!(
                "entry {i} is {}",
                entries[i]
            )));
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidProbability(format!("entries sum to {total}")));
        }
        Ok(ProbabilityVector(entries))
    }

    /// Indicator vector `e_index` of length `n`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::InvalidArgument(format!(
                "one-hot index {index} out of range for length {n}"
            )));
        }
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Ok(ProbabilityVector(v))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(ProbabilityVector(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of strictly positive entries.
    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&p| p > 0.0).count()
    }
}

/// Threshold found by the solver. For `α = 1` `eta` is the log-partition
/// function, so that `p = exp(z - eta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub eta: f64,
    pub support_size: usize,
}

/// α-entmax of `z`.
pub fn entmax(z: &LogitVector, alpha: Alpha) -> ProbabilityVector {
    let mut out = vec![0.0; z.len()];
    entmax_into(z.as_slice(), alpha, &mut out);
    ProbabilityVector(out)
}

/// α-entmax together with the threshold that produced it.
pub fn entmax_with_threshold(z: &LogitVector, alpha: Alpha) -> (ProbabilityVector, Threshold) {
    let mut out = vec![0.0; z.len()];
    let t = entmax_into(z.as_slice(), alpha, &mut out);
    (ProbabilityVector(out), t)
}

/// Slice-level kernel behind [`entmax`]. `z` must be non-empty and finite and
/// `out` the same length; used directly by the batched training losses.
pub fn entmax_into(z: &[f64], alpha: Alpha, out: &mut [f64]) -> Threshold {
    debug_assert_eq!(z.len(), out.len());
    debug_assert!(!z.is_empty());
    let n = z.len();
    if n == 1 {
        out[0] = 1.0;
        return Threshold {
            eta: if alpha.is_softmax() {
                z[0]
            } else {
                (alpha.0 - 1.0) * z[0] - 1.0
            },
            support_size: 1,
        };
    }
    let a = alpha.0;
    if a == 1.0 {
        softmax_into(z, out)
    } else if a == 2.0 {
        sparsemax_into(z, out)
    } else if a == 1.5 {
        entmax15_into(z, out)
    } else {
        entmax_bisect_into(z, a, out)
    }
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn softmax_into(z: &[f64], out: &mut [f64]) -> Threshold {
    let max = max_of(z);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Threshold {
        eta: max + sum.ln(),
        support_size: out.iter().filter(|&&p| p > 0.0).count(),
    }
}

/// Entries within 1 of the maximum, sorted descending (stable).
fn sorted_candidates(shifted: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut cand: Vec<f64> = shifted.filter(|&v| v > -1.0).collect();
    cand.sort_by(|a, b| b.total_cmp(a));
    cand
}

fn sparsemax_into(z: &[f64], out: &mut [f64]) -> Threshold {
    let max = max_of(z);
    let cand = sorted_candidates(z.iter().map(|&v| v - max));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (j, &v) in cand.iter().enumerate() {
        cumsum += v;
        if 1.0 + (j + 1) as f64 * v > cumsum {
            support = j + 1;
            support_sum = cumsum;
        } else {
            break;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max - tau).max(0.0);
    }
    Threshold {
        eta: tau + max,
        support_size: support,
    }
}

fn entmax15_into(z: &[f64], out: &mut [f64]) -> Threshold {
    let max = max_of(z);
    // Work on (α - 1) z = z / 2, shifted so the maximum is 0.
    let cand = sorted_candidates(z.iter().map(|&v| (v - max) * 0.5));
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut support = 0;
    let mut tau_star = 0.0;
    for (j, &v) in cand.iter().enumerate() {
        let k = (j + 1) as f64;
        sum += v;
        sum_sq += v * v;
        let mean = sum / k;
        let ss = sum_sq - sum * sum / k;
        let delta = ((1.0 - ss) / k).max(0.0);
        let tau = mean - delta.sqrt();
        if tau <= v {
            support = j + 1;
            tau_star = tau;
        } else {
            break;
        }
    }
    for (o, &v) in out.iter_mut().zip(z) {
        let d = ((v - max) * 0.5 - tau_star).max(0.0);
        *o = d * d;
    }
    Threshold {
        eta: tau_star + 0.5 * max,
        support_size: support,
    }
}

fn entmax_bisect_into(z: &[f64], a: f64, out: &mut [f64]) -> Threshold {
    let n = z.len();
    let am1 = a - 1.0;
    let inv = 1.0 / am1;
    let max = max_of(z);
    // In shifted coordinates x = (α-1)(z - max), max x = 0 and η lies in
    // [-1, -(1/n)^(α-1)].
    let mut lo = -1.0;
    let hi = -(1.0 / n as f64).powf(am1);
    let mut width = hi - lo;
    let mut mid = lo;
    let mut total = 0.0;
    for _ in 0..BISECT_MAX_ITER {
        width *= 0.5;
        mid = lo + width;
        total = 0.0;
        for (o, &v) in out.iter_mut().zip(z) {
            let d = am1 * (v - max) - mid;
            *o = if d > 0.0 { d.powf(inv) } else { 0.0 };
            total += *o;
        }
        if total >= 1.0 {
            lo = mid;
        }
        if (total - 1.0).abs() < BISECT_TOL {
            break;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Threshold {
        eta: mid + am1 * max,
        support_size: out.iter().filter(|&&p| p > 0.0).count(),
    }
}

/// Tsallis α-entropy, with Shannon entropy (nats) at `α = 1`.
pub fn tsallis_entropy(p: &ProbabilityVector, alpha: Alpha) -> f64 {
    entropy_slice(p.as_slice(), alpha)
}

pub(crate) fn entropy_slice(p: &[f64], alpha: Alpha) -> f64 {
    let a = alpha.0;
    let h = if a == 1.0 {
        -p.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    } else if a == 2.0 {
        0.5 * p.iter().map(|&v| v - v * v).sum::<f64>()
    } else if a == 1.5 {
        (4.0 / 3.0) * p.iter().map(|&v| v - v * v.sqrt()).sum::<f64>()
    } else {
        p.iter().map(|&v| v - v.powf(a)).sum::<f64>() / (a * (a - 1.0))
    };
    h.max(0.0)
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

/// Fenchel-Young loss of `entmax` evaluated at the scaled logits `z / tau`:
///
/// ```text
/// L(z, p) = (p̂ - p)ᵀ w + H_α(p̂) - H_α(p),   w = z / tau,  p̂ = entmax(w)
/// ```
///
/// Non-negative, and zero exactly when `p = entmax(z / tau)`.
pub fn fy_loss(z: &LogitVector, p: &ProbabilityVector, alpha: Alpha, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if z.len() != p.len() {
        return Err(Error::LengthMismatch(z.len(), p.len()));
    }
    let w: Vec<f64> = z.as_slice().iter().map(|v| v / tau).collect();
    let mut p_hat = vec![0.0; w.len()];
    Ok(fy_loss_scaled(&w, p.as_slice(), alpha, &mut p_hat))
}

/// Gradient of [`fy_loss`] with respect to `z`: `(entmax(z / tau) - p) / tau`.
pub fn fy_loss_grad(
    z: &LogitVector,
    p: &ProbabilityVector,
    alpha: Alpha,
    tau: f64,
) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if z.len() != p.len() {
        return Err(Error::LengthMismatch(z.len(), p.len()));
    }
    let w: Vec<f64> = z.as_slice().iter().map(|v| v / tau).collect();
    let mut p_hat = vec![0.0; w.len()];
    entmax_into(&w, alpha, &mut p_hat);
    Ok(p_hat
        .iter()
        .zip(p.as_slice())
        .map(|(q, t)| (q - t) / tau)
        .collect())
}

/// FY loss at already-scaled scores `w`. Writes `entmax(w)` into `p_hat`.
pub fn fy_loss_scaled(w: &[f64], target: &[f64], alpha: Alpha, p_hat: &mut [f64]) -> f64 {
    entmax_into(w, alpha, p_hat);
    let linear: f64 = p_hat
        .iter()
        .zip(target)
        .zip(w)
        .map(|((q, t), x)| (q - t) * x)
        .sum();
    let loss = linear + entropy_slice(p_hat, alpha) - entropy_slice(target, alpha);
    loss.max(0.0)
}

/// FY loss at scaled scores `w` against the indicator target `e_target`.
/// Writes `entmax(w)` into `p_hat`.
pub fn fy_loss_one_hot(w: &[f64], target: usize, alpha: Alpha, p_hat: &mut [f64]) -> f64 {
    entmax_into(w, alpha, p_hat);
    let linear: f64 = p_hat.iter().zip(w).map(|(q, x)| q * x).sum::<f64>() - w[target];
    (linear + entropy_slice(p_hat, alpha)).max(0.0)
}

/// `Jᵀv` for the Jacobian of α-entmax at output `p`.
///
/// `J = diag(s) - s sᵀ / (1ᵀ s)` with `s_i = p_i^(2-α)` on the support and 0
/// elsewhere. `J` is symmetric and its rows sum to zero.
pub fn entmax_jacobian_vector_product(
    p: &ProbabilityVector,
    alpha: Alpha,
    v: &[f64],
) -> Result<Vec<f64>> {
    if p.len() != v.len() {
        return Err(Error::LengthMismatch(p.len(), v.len()));
    }
    let expo = 2.0 - alpha.0;
    let s: Vec<f64> = p
        .as_slice()
        .iter()
        .map(|&q| if q > 0.0 { q.powf(expo) } else { 0.0 })
        .collect();
    let s_sum: f64 = s.iter().sum();
    let sv: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
    let scale = sv / s_sum;
    Ok(s.iter().zip(v).map(|(si, vi)| si * vi - si * scale).collect())
}

/// Reference solvers used to check the fast paths. They share no code with
/// the kernels above.
pub mod oracle {
    use super::{Alpha, LogitVector, ProbabilityVector};

    /// Solves the threshold equation by plain bisection on the unshifted
    /// logits (200 halvings, no renormalization). Softmax for `α = 1`.
    pub fn oracle_entmax(z: &LogitVector, alpha: Alpha) -> ProbabilityVector {
        let z = z.as_slice();
        let a = alpha.value();
        if z.len() == 1 {
            return ProbabilityVector(vec![1.0]);
        }
        if a == 1.0 {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            return ProbabilityVector(e.into_iter().map(|v| v / s).collect());
        }
        let scaled: Vec<f64> = z.iter().map(|v| (a - 1.0) * v).collect();
        let top = scaled.iter().cloned().fold(f64::MIN, f64::max);
        let mass = |eta: f64| -> f64 {
            scaled
                .iter()
                .map(|x| (x - eta).max(0.0).powf(1.0 / (a - 1.0)))
                .sum()
        };
        // mass(top - 1) >= 1 and mass(top) = 0.
        let (mut lo, mut hi) = (top - 1.0, top);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass(mid) >= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let eta = 0.5 * (lo + hi);
        ProbabilityVector(
            scaled
                .iter()
                .map(|x| (x - eta).max(0.0).powf(1.0 / (a - 1.0)))
                .collect(),
        )
    }

    /// Sparsemax by exhaustive search over support sets: the unique subset
    /// `S` whose threshold `(Σ_S z - 1) / |S|` lies strictly below every member
    /// and at or above every non-member. Exponential in `n`; test sizes only.
    pub fn sparsemax_exhaustive(z: &[f64]) -> Vec<f64> {
        let n = z.len();
        assert!((1..=24).contains(&n), "exhaustive oracle supports 1..=24 entries");
        for mask in 1u32..(1u32 << n) {
            let mut sum = 0.0;
            let mut size = 0usize;
            for (i, v) in z.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    sum += v;
                    size += 1;
                }
            }
            let tau = (sum - 1.0) / size as f64;
            let consistent = z.iter().enumerate().all(|(i, &v)| {
                if mask & (1 << i) != 0 {
                    v > tau
                } else {
                    v <= tau
                }
            });
            if consistent {
                return z.iter().map(|v| (v - tau).max(0.0)).collect();
            }
        }
        unreachable!("every finite vector has a sparsemax support")
    }
}
