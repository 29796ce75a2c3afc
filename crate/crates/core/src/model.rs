//! Model abstraction for McKean-Vlasov coefficients and the built-in models.
//!
//! A model supplies the coefficients `V_k(x, μ)` for `k = 0..=d_w`, with
//! `k = 0` the drift (integrated against `dt`) and `k ≥ 1` the diffusion
//! columns (integrated against `dW^k`). The spatial derivative `∂ₓV_k` and
//! the Lions derivative `∂_μV_k(x, μ, v)` are supplied analytically.

use std::borrow::Cow;
use std::sync::Arc;

use crate::counterexample::MeanFlow;
use crate::error::{Error, Result};
use crate::linalg;
use crate::reduce::{exact_record_sums, ExactSum};

/// How a model's Lions derivative depends on the sample point `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuCoupling {
    /// `∂_μV_k ≡ 0`: coefficients ignore the measure's fluctuations.
    Absent,
    /// `∂_μV_k(x, μ, v) = G_k(x, μ) · H_k(v)`; ensemble couplings cost O(N).
    Separable,
    /// No usable structure; ensemble couplings cost O(N²).
    General,
}

/// Empirical or Dirac stand-in for the law of the solution.
#[derive(Debug, Clone)]
pub struct MeasureView<'a> {
    dim: usize,
    states: Cow<'a, [f64]>,
    weights: Option<Vec<f64>>,
    mean: Vec<f64>,
    second_moment: f64,
}

impl<'a> MeasureView<'a> {
    /// Uniform-weight empirical measure over `states` (n × dim, row-major).
    pub fn empirical(dim: usize, states: &'a [f64]) -> Self {
        assert!(dim > 0 && !states.is_empty() && states.len() % dim == 0);
        let n = states.len() / dim;
        let sums = exact_record_sums(n, dim + 1, |i, out| {
            let x = &states[i * dim..(i + 1) * dim];
            out[..dim].copy_from_slice(x);
            out[dim] = x.iter().map(|v| v * v).sum();
        });
        let nf = n as f64;
        Self {
            dim,
            mean: sums[..dim].iter().map(|s| s / nf).collect(),
            second_moment: sums[dim] / nf,
            states: Cow::Borrowed(states),
            weights: None,
        }
    }

    /// Weighted samples; weights must be non-negative and sum to one.
    pub fn weighted(samples: &[(f64, Vec<f64>)]) -> Result<MeasureView<'static>> {
        let dim = samples
            .first()
            .map(|(_, x)| x.len())
            .ok_or_else(|| Error::Domain("empty measure".into()))?;
        if dim == 0 || samples.iter().any(|(_, x)| x.len() != dim) {
            return Err(Error::Domain("inconsistent sample dimensions".into()));
        }
        if samples.iter().any(|(w, _)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain("weights must be finite and non-negative".into()));
        }
        let total: f64 = samples.iter().map(|(w, _)| *w).collect::<ExactSum>().value();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights sum to {total}, expected 1")));
        }
        let mut mean = Vec::with_capacity(dim);
        for c in 0..dim {
            mean.push(samples.iter().map(|(w, x)| w * x[c]).collect::<ExactSum>().value());
        }
        let second_moment = samples
            .iter()
            .map(|(w, x)| w * x.iter().map(|v| v * v).sum::<f64>())
            .collect::<ExactSum>()
            .value();
        let states: Vec<f64> = samples.iter().flat_map(|(_, x)| x.iter().copied()).collect();
        Ok(MeasureView {
            dim,
            states: Cow::Owned(states),
            weights: Some(samples.iter().map(|(w, _)| *w).collect()),
            mean,
            second_moment,
        })
    }

    /// The point mass `δ_x`.
    pub fn dirac(x: &[f64]) -> MeasureView<'static> {
        MeasureView {
            dim: x.len(),
            states: Cow::Owned(x.to_vec()),
            weights: None,
            mean: x.to_vec(),
            second_moment: x.iter().map(|v| v * v).sum(),
        }
    }

    /// Moment-only view (no samples), as replayed from a moment-stored flow.
    pub fn from_moments(mean: Vec<f64>, second_moment: f64) -> MeasureView<'static> {
        MeasureView {
            dim: mean.len(),
            states: Cow::Owned(Vec::new()),
            weights: None,
            mean,
            second_moment,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    pub fn has_samples(&self) -> bool {
        !self.states.is_empty()
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.len() as f64,
        }
    }

    /// `(weight, state)` pairs.
    pub fn samples(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        (0..self.len()).map(move |i| (self.weight(i), self.state(i)))
    }
}

/// A McKean-Vlasov model `dX = Σ_k V_k(X, P_X) dW^k` with `dW^0 = dt`.
///
/// Implementations must be pure: they are evaluated concurrently for many
/// particles. Matrices are d×d, row-major.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Brownian dimension `d'`.
    fn noise_dim(&self) -> usize;

    fn coeff(&self, k: usize, x: &[f64], mu: &MeasureView<'_>, out: &mut [f64]);

    fn dcoeff_x(&self, k: usize, x: &[f64], mu: &MeasureView<'_>, out: &mut [f64]);

    fn dcoeff_mu(&self, k: usize, x: &[f64], mu: &MeasureView<'_>, v: &[f64], out: &mut [f64]);

    /// The constant `K` bounding both derivative families.
    fn deriv_bound(&self) -> f64;

    fn mu_coupling(&self) -> MuCoupling {
        MuCoupling::General
    }

    /// `G_k(x, μ)` of a separable Lions derivative. The default assumes
    /// `H_k ≡ I`, i.e. `∂_μV_k` constant in `v`.
    fn dcoeff_mu_factor(&self, k: usize, x: &[f64], mu: &MeasureView<'_>, out: &mut [f64]) {
        self.dcoeff_mu(k, x, mu, x, out);
    }

    /// `H_k(v)` of a separable Lions derivative.
    fn dcoeff_mu_kernel(&self, _k: usize, _v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = if i / d == i % d { 1.0 } else { 0.0 };
        }
    }

    /// Whether coefficients read individual samples rather than only the
    /// cached moments. Moment-stored flows cannot be replayed if so.
    fn reads_samples(&self) -> bool {
        true
    }
}

/// `dX = (A X + B mean(μ)) dt + Σ_k C_k X dW^k`.
#[derive(Debug, Clone)]
pub struct LinearMeanField {
    d: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<Vec<f64>>,
    bound: f64,
    name: &'static str,
}

fn flatten(name: &str, rows: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::config(name, format!("expected a {d}x{d} matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(name, "matrix entries must be finite"));
    }
    Ok(rows.iter().flatten().copied().collect())
}

pub fn make_linear_meanfield_model(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<Vec<f64>>],
) -> Result<LinearMeanField> {
    let d = a.len();
    if d == 0 {
        return Err(Error::config("A", "dimension must be positive"));
    }
    let a = flatten("A", a, d)?;
    let b = flatten("B", b, d)?;
    let c = c
        .iter()
        .map(|ck| flatten("C", ck, d))
        .collect::<Result<Vec<_>>>()?;
    let bound = std::iter::once(&a)
        .chain(std::iter::once(&b))
        .chain(c.iter())
        .map(|m| linalg::spectral_norm(d, m))
        .fold(0.0, f64::max);
    Ok(LinearMeanField { d, a, b, c, bound, name: "linear" })
}

/// Scalar geometric Brownian motion `dX = aX dt + σX dW`.
pub fn make_gbm_model(a: f64, sigma: f64) -> Result<LinearMeanField> {
    let m = make_linear_meanfield_model(&[vec![a]], &[vec![0.0]], &[vec![vec![sigma]]])?;
    Ok(LinearMeanField { name: "gbm", ..m })
}

impl LinearMeanField {
    pub fn drift_matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn mean_matrix(&self) -> &[f64] {
        &self.b
    }

    pub fn diffusion_matrices(&self) -> &[Vec<f64>] {
        &self.c
    }
}

impl Model for LinearMeanField {
    fn name(&self) -> &str {
        self.name
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn noise_dim(&self) -> usize {
        self.c.len()
    }

    fn coeff(&self, k: usize, x: &[f64], mu: &MeasureView<'_>, out: &mut [f64]) {
        let d = self.d;
        if k == 0 {
            let m = mu.mean();
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += self.a[i * d + j] * x[j];
                }
                let mut t = 0.0;
                for j in 0..d {
                    t += self.b[i * d + j] * m[j];
                }
                out[i] = s + t;
            }
        } else {
            let c = &self.c[k - 1];
            for i in 0..d {
                out[i] = (0..d).map(|j| c[i * d + j] * x[j]).sum();
            }
        }
    }

    fn dcoeff_x(&self, k: usize, _x: &[f64], _mu: &MeasureView<'_>, out: &mut [f64]) {
        if k == 0 {
            out.copy_from_slice(&self.a);
        } else {
            out.copy_from_slice(&self.c[k - 1]);
        }
    }

    fn dcoeff_mu(&self, k: usize, _x: &[f64], _mu: &MeasureView<'_>, _v: &[f64], out: &mut [f64]) {
        if k == 0 {
            out.copy_from_slice(&self.b);
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn deriv_bound(&self) -> f64 {
        self.bound
    }

    fn mu_coupling(&self) -> MuCoupling {
        if self.b.iter().all(|v| *v == 0.0) {
            MuCoupling::Absent
        } else {
            MuCoupling::Separable
        }
    }

    fn reads_samples(&self) -> bool {
        false
    }
}

/// The one-dimensional model `dX = (X − ḡ(E X)) dt + X dW` driven by the
/// staircase function of a [`MeanFlow`].
#[derive(Debug, Clone)]
pub struct CounterexampleModel {
    flow: Arc<MeanFlow>,
}

pub fn make_counterexample_model(mean_flow: Arc<MeanFlow>) -> CounterexampleModel {
    CounterexampleModel { flow: mean_flow }
}

impl CounterexampleModel {
    pub fn mean_flow(&self) -> &MeanFlow {
        &self.flow
    }
}

impl Model for CounterexampleModel {
    fn name(&self) -> &str {
        "counterexample"
    }

    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn coeff(&self, k: usize, x: &[f64], mu: &MeasureView<'_>, out: &mut [f64]) {
        out[0] = if k == 0 { x[0] - self.flow.g(mu.mean()[0]) } else { x[0] };
    }

    fn dcoeff_x(&self, _k: usize, _x: &[f64], _mu: &MeasureView<'_>, out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn dcoeff_mu(&self, k: usize, _x: &[f64], mu: &MeasureView<'_>, _v: &[f64], out: &mut [f64]) {
        out[0] = if k == 0 { -self.flow.g_prime(mu.mean()[0]) } else { 0.0 };
    }

    fn deriv_bound(&self) -> f64 {
        1.0
    }

    fn mu_coupling(&self) -> MuCoupling {
        MuCoupling::Separable
    }

    fn reads_samples(&self) -> bool {
        false
    }
}

/// `4(p(p−1)K² + 2p²K² + pK)`, the growth constant of the p-th moment
/// bound on the Jacobian flows.
pub fn theoretical_c(p: f64, k: f64) -> Result<f64> {
    if !(p >= 2.0) {
        return Err(Error::Domain(format!("p must be >= 2, got {p}")));
    }
    if !(k >= 0.0) {
        return Err(Error::Domain(format!("K must be >= 0, got {k}")));
    }
    Ok(4.0 * (p * (p - 1.0) * k * k + 2.0 * p * p * k * k + p * k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterexample::build_mean_flow;
    use proptest::prelude::*;

    fn builtins() -> Vec<Box<dyn Model>> {
        vec![
            Box::new(make_gbm_model(0.1, 0.4).unwrap()),
            Box::new(make_gbm_model(0.0, 0.0).unwrap()),
            Box::new(
                make_linear_meanfield_model(
                    &[vec![0.1, 0.0], vec![0.0, 0.0]],
                    &[vec![-0.5, 0.0], vec![0.0, 0.5]],
                    &[vec![vec![0.4, 0.0], vec![0.0, 1.0]]],
                )
                .unwrap(),
            ),
            Box::new(make_counterexample_model(Arc::new(build_mean_flow(10).unwrap()))),
        ]
    }

    #[test]
    fn theoretical_c_values() {
        assert_eq!(theoretical_c(2.0, 1.0).unwrap(), 48.0);
        assert_eq!(theoretical_c(2.0, 0.0).unwrap(), 0.0);
        assert_eq!(theoretical_c(4.0, 1.0).unwrap(), 192.0);
        assert!((theoretical_c(2.0, 0.4).unwrap() - 9.6).abs() < 1e-12);
        assert!(matches!(theoretical_c(1.5, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_model_dimension_mismatch() {
        let err = make_linear_meanfield_model(&[vec![1.0]], &[vec![1.0, 0.0]], &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "B"));
        let err =
            make_linear_meanfield_model(&[vec![1.0]], &[vec![0.0]], &[vec![vec![1.0, 2.0]]])
                .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "C"));
    }

    #[test]
    fn linear_model_derivatives() {
        let m = make_linear_meanfield_model(&[vec![0.0]], &[vec![0.5]], &[vec![vec![1.0]]]).unwrap();
        let mu = MeasureView::dirac(&[3.0]);
        let mut out = [0.0];
        m.dcoeff_x(0, &[1.0], &mu, &mut out);
        assert_eq!(out, [0.0]);
        m.dcoeff_mu(0, &[1.0], &mu, &[7.0], &mut out);
        assert_eq!(out, [0.5]);
        m.dcoeff_x(1, &[1.0], &mu, &mut out);
        assert_eq!(out, [1.0]);
        m.dcoeff_mu(1, &[1.0], &mu, &[7.0], &mut out);
        assert_eq!(out, [0.0]);
        m.coeff(0, &[2.0], &mu, &mut out);
        assert_eq!(out, [1.5]);
        assert_eq!(m.mu_coupling(), MuCoupling::Separable);
        assert_eq!(m.deriv_bound(), 1.0);
        assert_eq!(make_gbm_model(0.1, 0.4).unwrap().deriv_bound(), 0.4);
    }

    #[test]
    fn counterexample_coefficients() {
        let model = make_counterexample_model(Arc::new(build_mean_flow(8).unwrap()));
        let mut out = [0.0];
        let mu = MeasureView::dirac(&[1.5]);
        model.coeff(0, &[3.0], &mu, &mut out);
        assert_eq!(out, [3.0]);
        model.dcoeff_mu(0, &[3.0], &mu, &[0.0], &mut out);
        assert_eq!(out[0], 0.0);
        model.coeff(1, &[0.0], &mu, &mut out);
        assert_eq!(out, [0.0]);
        let mu = MeasureView::dirac(&[4.0]);
        model.dcoeff_mu(0, &[3.0], &mu, &[0.0], &mut out);
        assert_eq!(out, [-0.25]);
        assert_eq!(model.deriv_bound(), 1.0);
    }

    #[test]
    fn weighted_measure_validation() {
        let ok = MeasureView::weighted(&[(0.25, vec![0.0]), (0.75, vec![4.0])]).unwrap();
        assert_eq!(ok.mean(), &[3.0]);
        assert_eq!(ok.second_moment(), 12.0);
        assert!(MeasureView::weighted(&[(0.5, vec![0.0]), (0.6, vec![1.0])]).is_err());
        assert!(MeasureView::weighted(&[(-0.5, vec![0.0]), (1.5, vec![1.0])]).is_err());
    }

    #[test]
    fn empirical_measure_moments() {
        let states = [0.0, 2.0];
        let mu = MeasureView::empirical(1, &states);
        assert_eq!(mu.mean(), &[1.0]);
        assert_eq!(mu.second_moment(), 2.0);
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.samples().map(|(w, _)| w).sum::<f64>(), 1.0);
    }

    fn random_measure(d: usize, pts: &[f64]) -> MeasureView<'static> {
        let n = pts.len() / d;
        let samples: Vec<(f64, Vec<f64>)> = (0..n)
            .map(|i| (1.0 / n as f64, pts[i * d..(i + 1) * d].to_vec()))
            .collect();
        MeasureView::weighted(&samples).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn builtin_derivatives_are_bounded(
            which in 0usize..4,
            x in proptest::collection::vec(-50.0f64..5000.0, 2),
            pts in proptest::collection::vec(-50.0f64..5000.0, 6),
            v in proptest::collection::vec(-50.0f64..50.0, 2),
        ) {
            let models = builtins();
            let m = &models[which];
            let d = m.dim();
            let mu = random_measure(d, &pts[..3 * d]);
            let mut vec_out = vec![0.0; d];
            let mut mat = vec![0.0; d * d];
            for k in 0..=m.noise_dim() {
                m.coeff(k, &x[..d], &mu, &mut vec_out);
                prop_assert!(vec_out.iter().all(|v| v.is_finite()));
                m.dcoeff_x(k, &x[..d], &mu, &mut mat);
                prop_assert!(linalg::spectral_norm(d, &mat) <= m.deriv_bound() + 1e-9);
                m.dcoeff_mu(k, &x[..d], &mu, &v[..d], &mut mat);
                prop_assert!(mat.iter().all(|v| v.is_finite()));
                prop_assert!(linalg::spectral_norm(d, &mat) <= m.deriv_bound() + 1e-9);
            }
        }

        #[test]
        fn dcoeff_x_matches_finite_differences(
            which in 0usize..4,
            x in proptest::collection::vec(-5.0f64..50.0, 2),
            pts in proptest::collection::vec(-5.0f64..50.0, 6),
        ) {
            let models = builtins();
            let m = &models[which];
            let d = m.dim();
            let mu = random_measure(d, &pts[..3 * d]);
            let h = 1e-5;
            let mut mat = vec![0.0; d * d];
            let mut plus = vec![0.0; d];
            let mut minus = vec![0.0; d];
            for k in 0..=m.noise_dim() {
                m.dcoeff_x(k, &x[..d], &mu, &mut mat);
                for j in 0..d {
                    let mut xp = x[..d].to_vec();
                    let mut xm = x[..d].to_vec();
                    xp[j] += h;
                    xm[j] -= h;
                    m.coeff(k, &xp, &mu, &mut plus);
                    m.coeff(k, &xm, &mu, &mut minus);
                    for i in 0..d {
                        let fd = (plus[i] - minus[i]) / (2.0 * h);
                        let exact = mat[i * d + j];
                        prop_assert!((fd - exact).abs() <= 1e-4 * exact.abs().max(1.0));
                    }
                }
            }
        }

        #[test]
        fn separable_lions_derivative_constant_in_v(
            which in 0usize..4,
            x in proptest::collection::vec(-5.0f64..500.0, 2),
            pts in proptest::collection::vec(-5.0f64..500.0, 6),
            v1 in proptest::collection::vec(-50.0f64..50.0, 2),
            v2 in proptest::collection::vec(-50.0f64..50.0, 2),
        ) {
            let models = builtins();
            let m = &models[which];
            let d = m.dim();
            prop_assume!(m.mu_coupling() != MuCoupling::General);
            let mu = random_measure(d, &pts[..3 * d]);
            let mut a = vec![0.0; d * d];
            let mut b = vec![0.0; d * d];
            for k in 0..=m.noise_dim() {
                m.dcoeff_mu(k, &x[..d], &mu, &v1[..d], &mut a);
                m.dcoeff_mu(k, &x[..d], &mu, &v2[..d], &mut b);
                prop_assert_eq!(&a, &b);
            }
        }
    }
}
