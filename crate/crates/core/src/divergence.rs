//! Henze–Penrose divergence estimators.
//!
//! Two samples are pooled into one node set: the targets (label 0) come
//! first, then the predictions (label 1). The combined index fixes both the
//! node order and nearest-neighbor tie-breaking.
//!
//! * The exact estimator counts directed nearest-neighbor edges whose
//!   endpoints carry different labels (`t_n`), then inverts the asymptotic
//!   cut-edge ratio `t_n / n → 2α(1−α)(1 − D)`.
//! * The smoothed estimator replaces each node's single nearest neighbor with
//!   a softmax over `−distance/λ` on the fully connected graph, giving a cut
//!   mass `t̂_n` that is differentiable in the point coordinates.

use serde::Serialize;

use crate::numerics::{euclidean, pairwise_distances, row_softmax_neg_scaled, Tensor};
use crate::Result;

/// Targets (`points_a`) and predictions (`points_b`) sharing one dimension.
#[derive(Clone, Debug)]
pub struct LabeledPointSet {
    points_a: Tensor,
    points_b: Tensor,
}

impl LabeledPointSet {
    pub fn new(points_a: Tensor, points_b: Tensor) -> Result<Self> {
        ensure!(
            points_a.shape().len() == 2 && points_b.shape().len() == 2,
            "point sets must be matrices"
        );
        ensure!(
            points_a.row_len() == points_b.row_len(),
            "point sets differ in dimension: {} vs {}",
            points_a.row_len(),
            points_b.row_len()
        );
        ensure!(
            points_a.is_finite() && points_b.is_finite(),
            "point sets contain non-finite coordinates"
        );
        Ok(Self { points_a, points_b })
    }

    pub fn points_a(&self) -> &Tensor {
        &self.points_a
    }

    pub fn points_b(&self) -> &Tensor {
        &self.points_b
    }

    pub fn n0(&self) -> usize {
        self.points_a.rows()
    }

    pub fn n1(&self) -> usize {
        self.points_b.rows()
    }

    pub fn len(&self) -> usize {
        self.n0() + self.n1()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points_a.row_len()
    }

    /// Membership label of combined node `i`.
    fn label(&self, i: usize) -> u8 {
        u8::from(i >= self.n0())
    }

    /// Coordinates of combined node `i`.
    fn node(&self, i: usize) -> &[f64] {
        if i < self.n0() {
            self.points_a.row(i)
        } else {
            self.points_b.row(i - self.n0())
        }
    }

    /// All nodes stacked as one `n × d` matrix, `points_a` first.
    pub fn pooled(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.dim());
        data.extend_from_slice(self.points_a.data());
        data.extend_from_slice(self.points_b.data());
        Tensor::new(vec![self.len(), self.dim()], data).expect("pooled shape")
    }

    /// The same sets with the two labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            points_a: self.points_b.clone(),
            points_b: self.points_a.clone(),
        }
    }
}

/// Output of either estimator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// `t_n` (exact) or `t̂_n` (smoothed).
    pub cut_mass: f64,
    pub n: usize,
    pub n0: usize,
    pub n1: usize,
    pub alpha: f64,
    pub d_raw: f64,
    pub d_clamped: f64,
}

impl DivergenceReport {
    fn from_cut_mass(cut_mass: f64, n0: usize, n1: usize) -> Self {
        let n = n0 + n1;
        let d_raw = 1.0 - n as f64 * cut_mass / (2.0 * n0 as f64 * n1 as f64);
        Self {
            cut_mass,
            n,
            n0,
            n1,
            alpha: n0 as f64 / n as f64,
            d_raw,
            d_clamped: d_raw.clamp(0.0, 1.0),
        }
    }
}

/// The f-function whose divergence the cut-edge ratio recovers.
///
/// `f(t) = ((αt − (1−α))² / (αt + (1−α)) − (2α−1)²) / (4α(1−α))`
pub fn f_alpha(t: f64, alpha: f64) -> Result<f64> {
    ensure!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1), got {alpha}");
    ensure!(t >= 0.0 && t.is_finite(), "t must be finite and >= 0, got {t}");
    let beta = 1.0 - alpha;
    let num = alpha * t - beta;
    let value = (num * num / (alpha * t + beta) - (2.0 * alpha - 1.0).powi(2)) / (4.0 * alpha * beta);
    Ok(value)
}

fn check_nonempty(sets: &LabeledPointSet) -> Result<()> {
    ensure!(
        sets.n0() >= 1 && sets.n1() >= 1,
        "both point sets must be nonempty"
    );
    ensure!(sets.len() >= 2, "need at least two nodes, got {}", sets.len());
    Ok(())
}

/// Index of the nearest other node, lowest combined index on ties.
fn nearest_neighbor(sets: &LabeledPointSet, i: usize) -> usize {
    let p = sets.node(i);
    let mut best = usize::MAX;
    let mut best_d = f64::INFINITY;
    for j in (0..sets.len()).filter(|&j| j != i) {
        let d = euclidean(p, sets.node(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Number of directed nearest-neighbor edges joining differently labeled nodes.
pub fn nn_cut_count(sets: &LabeledPointSet) -> Result<usize> {
    check_nonempty(sets)?;
    Ok((0..sets.len())
        .filter(|&i| sets.label(i) != sets.label(nearest_neighbor(sets, i)))
        .count())
}

/// Exact estimator: `d_raw = 1 − n·t_n / (2·n0·n1)`.
pub fn hp_divergence_exact(sets: &LabeledPointSet) -> Result<DivergenceReport> {
    let cut = nn_cut_count(sets)?;
    Ok(DivergenceReport::from_cut_mass(cut as f64, sets.n0(), sets.n1()))
}

/// Softmax weights over the pooled nodes.
fn softmax_weights(sets: &LabeledPointSet, lambda: f64) -> Result<(Tensor, Tensor)> {
    let pooled = sets.pooled();
    let dist = pairwise_distances(&pooled, &pooled)?;
    let weights = row_softmax_neg_scaled(&dist, lambda)?;
    Ok((dist, weights))
}

/// Per-row cut mass `m_i = Σ_{j≠i, π(j)≠π(i)} σ(w_i)_j`.
fn row_cut_masses(sets: &LabeledPointSet, weights: &Tensor) -> Vec<f64> {
    let n = sets.len();
    (0..n)
        .map(|i| {
            let li = sets.label(i);
            weights
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| sets.label(j) != li)
                .map(|(_, w)| w)
                .sum()
        })
        .collect()
}

/// Smoothed cut mass `t̂_n` over the fully connected graph.
pub fn smoothed_cut_mass(sets: &LabeledPointSet, lambda: f64) -> Result<f64> {
    check_nonempty(sets)?;
    let (_, weights) = softmax_weights(sets, lambda)?;
    Ok(row_cut_masses(sets, &weights).iter().sum())
}

fn check_balanced(sets: &LabeledPointSet) -> Result<()> {
    ensure!(
        sets.n0() == sets.n1(),
        "smoothed estimator needs equal-size sets, got {} and {}",
        sets.n0(),
        sets.n1()
    );
    Ok(())
}

/// Smoothed estimator on balanced sets: `d_raw = 1 − 2·t̂_n / n`.
pub fn hp_divergence_smoothed(sets: &LabeledPointSet, lambda: f64) -> Result<DivergenceReport> {
    check_balanced(sets)?;
    let cut = smoothed_cut_mass(sets, lambda)?;
    Ok(DivergenceReport::from_cut_mass(cut, sets.n0(), sets.n1()))
}

/// Gradient of the smoothed `d_raw` with respect to `points_b` (n1 × d).
///
/// For row `i` with weights `s_ij` and row cut mass `m_i`,
/// `∂m_i/∂dist_ik = −s_ik (c_ik − m_i) / λ` where `c_ik` flags a cut edge.
/// Distance `(i,k)` appears in rows `i` and `k`, and
/// `∂dist_ik/∂p_k = (p_k − p_i) / dist_ik`. Coincident points contribute a
/// zero subgradient.
pub fn smoothed_divergence_grad(sets: &LabeledPointSet, lambda: f64) -> Result<Tensor> {
    check_balanced(sets)?;
    check_nonempty(sets)?;
    let n = sets.len();
    let d = sets.dim();
    let (dist, weights) = softmax_weights(sets, lambda)?;
    let masses = row_cut_masses(sets, &weights);

    // g[i][k] = ∂t̂/∂dist_ik through row i only.
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let li = sets.label(i);
        for k in (0..n).filter(|&k| k != i) {
            let cut = if sets.label(k) != li { 1.0 } else { 0.0 };
            g[i * n + k] = -weights.at(i, k) * (cut - masses[i]) / lambda;
        }
    }

    let scale = -2.0 / n as f64;
    let n0 = sets.n0();
    let mut grad = vec![0.0; sets.n1() * d];
    for k in n0..n {
        let pk = sets.node(k);
        let out = &mut grad[(k - n0) * d..(k - n0 + 1) * d];
        for i in (0..n).filter(|&i| i != k) {
            let r = dist.at(i, k);
            if r == 0.0 {
                continue;
            }
            let coeff = scale * (g[i * n + k] + g[k * n + i]) / r;
            let pi = sets.node(i);
            for c in 0..d {
                out[c] += coeff * (pk[c] - pi[c]);
            }
        }
    }
    Tensor::new(vec![sets.n1(), d], grad)
}
