//! Shared Euler–Maruyama stepping for the coupled particle system and its
//! linearisation.
//!
//! One step maps the ensemble `X_m` to
//! `X^i_{m+1} = X^i_m + Σ_k V_k(X^i_m, μ_m) w_k` with `w_0 = dt`,
//! `w_k = ΔW^{i,k}` and `μ_m` the empirical measure of `X_m`. When Jacobians
//! are tracked, each particle carries `J^i = ∂X^i/∂x` for the common start
//! `x`, updated by the exact derivative of that map:
//! `J^i ← J^i + Σ_k [∂ₓV_k(X^i, μ) J^i + (1/N) Σ_j ∂_μV_k(X^i, μ, X^j) J^j] w_k`.
//! A tagged particle additionally carries the split of its `J` into the own
//! state channel (spatial) and the measure channel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{MeasureView, Model, MuCoupling};
use crate::noise::{IncrementSource, NoiseCursor};
use crate::reduce::{exact_record_sums, ExactSum};

/// Below this many particles the per-step loops run sequentially.
const PAR_MIN_PARTICLES: usize = 256;

/// Rescale tracked Jacobians by a power of two once entries leave
/// `[2^-RESCALE_BITS, 2^RESCALE_BITS]`.
const RESCALE_BITS: i32 = 200;

#[derive(Default)]
struct Scratch {
    v: Vec<f64>,
    dxv: Vec<f64>,
    g: Vec<f64>,
    coupling: Vec<f64>,
    term: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            v: vec![0.0; d],
            dxv: vec![0.0; d * d],
            g: vec![0.0; d * d],
            coupling: vec![0.0; d * d],
            term: vec![0.0; d * d],
        }
    }
}

/// Euler step of one state against a frozen measure.
pub(crate) fn euler_state_step(
    model: &dyn Model,
    x: &[f64],
    mu: &MeasureView<'_>,
    dt: f64,
    inc: &[f64],
    v: &mut [f64],
    out: &mut [f64],
) {
    out.copy_from_slice(x);
    for k in 0..=model.noise_dim() {
        let w = if k == 0 { dt } else { inc[k - 1] };
        model.coeff(k, x, mu, v);
        for (o, vi) in out.iter_mut().zip(v.iter()) {
            *o += vi * w;
        }
    }
}

/// Spatial Jacobian step `J ← J + Σ_k ∂ₓV_k(x, μ) J w_k`.
pub(crate) fn spatial_jacobian_step(
    model: &dyn Model,
    x: &[f64],
    mu: &MeasureView<'_>,
    dt: f64,
    inc: &[f64],
    jac: &[f64],
    dxv: &mut [f64],
    out: &mut [f64],
) {
    let d = model.dim();
    out.copy_from_slice(jac);
    for k in 0..=model.noise_dim() {
        let w = if k == 0 { dt } else { inc[k - 1] };
        model.dcoeff_x(k, x, mu, dxv);
        linalg::gemm_acc(d, w, dxv, jac, out);
    }
}

/// Per-step ensemble couplings for separable models:
/// `M_k = (1/N) Σ_j H_k(X^j) J^j`.
fn separable_caches(model: &dyn Model, states: &[f64], jac: &[f64], n: usize) -> Vec<f64> {
    let d = model.dim();
    let dd = d * d;
    let kmax = model.noise_dim() + 1;
    let sums = exact_record_sums(n, kmax * dd, |j, out| {
        let x = &states[j * d..(j + 1) * d];
        let jj = &jac[j * dd..(j + 1) * dd];
        let mut stack = [0.0; 16];
        let mut heap = Vec::new();
        let h: &mut [f64] = if dd <= 16 {
            &mut stack[..dd]
        } else {
            heap.resize(dd, 0.0);
            &mut heap
        };
        for k in 0..kmax {
            model.dcoeff_mu_kernel(k, x, h);
            linalg::gemm(d, h, jj, &mut out[k * dd..(k + 1) * dd]);
        }
    });
    let nf = n as f64;
    sums.into_iter().map(|s| s / nf).collect()
}

/// `(1/N) Σ_j ∂_μV_k(x, μ, X^j) J^j` for a general Lions derivative.
fn general_coupling(
    model: &dyn Model,
    k: usize,
    x: &[f64],
    mu: &MeasureView<'_>,
    states: &[f64],
    jac: &[f64],
    n: usize,
    out: &mut [f64],
) {
    let d = model.dim();
    let dd = d * d;
    let mut accs = vec![ExactSum::new(); dd];
    let mut kernel = vec![0.0; dd];
    let mut prod = vec![0.0; dd];
    for j in 0..n {
        model.dcoeff_mu(k, x, mu, &states[j * d..(j + 1) * d], &mut kernel);
        linalg::gemm(d, &kernel, &jac[j * dd..(j + 1) * dd], &mut prod);
        for (a, p) in accs.iter_mut().zip(&prod) {
            a.add(*p);
        }
    }
    let nf = n as f64;
    for (o, a) in out.iter_mut().zip(&accs) {
        *o = a.value() / nf;
    }
}

/// Measure-channel coupling `C_k` for particle state `x`.
#[allow(clippy::too_many_arguments)]
fn coupling_term(
    model: &dyn Model,
    k: usize,
    x: &[f64],
    mu: &MeasureView<'_>,
    caches: &[f64],
    states: &[f64],
    jac: &[f64],
    n: usize,
    g: &mut [f64],
    out: &mut [f64],
) {
    let d = model.dim();
    let dd = d * d;
    match model.mu_coupling() {
        MuCoupling::Absent => out.iter_mut().for_each(|v| *v = 0.0),
        MuCoupling::Separable => {
            model.dcoeff_mu_factor(k, x, mu, g);
            linalg::gemm(d, g, &caches[k * dd..(k + 1) * dd], out);
        }
        MuCoupling::General => general_coupling(model, k, x, mu, states, jac, n, out),
    }
}

pub(crate) struct Tagged {
    pub index: usize,
    pub spatial: Vec<f64>,
    pub measure: Vec<f64>,
}

pub(crate) struct Engine<'m> {
    model: &'m dyn Model,
    pub d: usize,
    pub dw: usize,
    pub n: usize,
    pub dt: f64,
    pub t0: f64,
    pub step_index: usize,
    pub states: Vec<f64>,
    next: Vec<f64>,
    incs: Vec<f64>,
    /// Per-particle Jacobians (empty when not tracked), N × d × d.
    pub jac: Vec<f64>,
    next_jac: Vec<f64>,
    pub tagged: Option<Tagged>,
    /// Tracked Jacobians are `2^log2_scale` times the stored values.
    pub log2_scale: i64,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m dyn Model, init: &[f64], dt: f64, t0: f64) -> Result<Self> {
        let d = model.dim();
        if init.is_empty() {
            return Err(Error::config("n_particles", "need at least one particle"));
        }
        if init.len() % d != 0 {
            return Err(Error::config("x0", format!("initial states must have dimension {d}")));
        }
        if init.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("x0", "initial states must be finite"));
        }
        let n = init.len() / d;
        Ok(Self {
            model,
            d,
            dw: model.noise_dim(),
            n,
            dt,
            t0,
            step_index: 0,
            states: init.to_vec(),
            next: vec![0.0; init.len()],
            incs: vec![0.0; n * model.noise_dim()],
            jac: Vec::new(),
            next_jac: Vec::new(),
            tagged: None,
            log2_scale: 0,
        })
    }

    /// Start tracking Jacobians from the identity (δ_x start).
    pub fn track_jacobians(&mut self, tagged: Option<usize>, n2_cap: usize) -> Result<()> {
        if self.model.mu_coupling() == MuCoupling::General && self.n > n2_cap {
            return Err(Error::config(
                "n_particles",
                format!(
                    "general Lions derivative needs O(N^2) work per step; N = {} exceeds the cap {}; \
                     provide a separable model or lower N",
                    self.n, n2_cap
                ),
            ));
        }
        let dd = self.d * self.d;
        let eye = linalg::identity(self.d);
        self.jac = eye.iter().copied().cycle().take(self.n * dd).collect();
        self.next_jac = vec![0.0; self.n * dd];
        if let Some(index) = tagged {
            if index >= self.n {
                return Err(Error::config("tagged", format!("tagged particle {index} out of range")));
            }
            self.tagged = Some(Tagged {
                index,
                spatial: eye,
                measure: vec![0.0; dd],
            });
        }
        Ok(())
    }

    pub fn step(&mut self, noise: &mut [NoiseCursor<'_>]) -> Result<()> {
        let (n, d, dw, dt) = (self.n, self.d, self.dw, self.dt);
        let dd = d * d;
        let parallel = n >= PAR_MIN_PARTICLES;
        if dw > 0 {
            if parallel {
                self.incs
                    .par_chunks_mut(dw)
                    .zip(noise.par_iter_mut())
                    .for_each(|(out, src)| src.next_increment(out));
            } else {
                for (out, src) in self.incs.chunks_mut(dw).zip(noise.iter_mut()) {
                    src.next_increment(out);
                }
            }
        }

        let model = self.model;
        let states = &self.states;
        let jac = &self.jac;
        let incs = &self.incs;
        let mu = MeasureView::empirical(d, states);
        let tracking = !jac.is_empty();
        let caches = if tracking && model.mu_coupling() == MuCoupling::Separable {
            separable_caches(model, states, jac, n)
        } else {
            Vec::new()
        };

        let update = |i: usize, out: &mut [f64], out_jac: Option<&mut [f64]>, s: &mut Scratch| {
            let x = &states[i * d..(i + 1) * d];
            let inc = &incs[i * dw..(i + 1) * dw];
            euler_state_step(model, x, &mu, dt, inc, &mut s.v, out);
            if let Some(out_jac) = out_jac {
                let ji = &jac[i * dd..(i + 1) * dd];
                out_jac.copy_from_slice(ji);
                for k in 0..=dw {
                    let w = if k == 0 { dt } else { inc[k - 1] };
                    model.dcoeff_x(k, x, &mu, &mut s.dxv);
                    linalg::gemm(d, &s.dxv, ji, &mut s.term);
                    coupling_term(model, k, x, &mu, &caches, states, jac, n, &mut s.g, &mut s.coupling);
                    for ((o, t), c) in out_jac.iter_mut().zip(&s.term).zip(&s.coupling) {
                        *o += w * (t + c);
                    }
                }
            }
        };

        match (tracking, parallel) {
            (false, true) => self
                .next
                .par_chunks_mut(d)
                .enumerate()
                .for_each_init(|| Scratch::new(d), |s, (i, out)| update(i, out, None, s)),
            (false, false) => {
                let mut s = Scratch::new(d);
                for (i, out) in self.next.chunks_mut(d).enumerate() {
                    update(i, out, None, &mut s);
                }
            }
            (true, true) => self
                .next
                .par_chunks_mut(d)
                .zip(self.next_jac.par_chunks_mut(dd))
                .enumerate()
                .for_each_init(|| Scratch::new(d), |s, (i, (out, oj))| update(i, out, Some(oj), s)),
            (true, false) => {
                let mut s = Scratch::new(d);
                for (i, (out, oj)) in self.next.chunks_mut(d).zip(self.next_jac.chunks_mut(dd)).enumerate() {
                    update(i, out, Some(oj), &mut s);
                }
            }
        }

        let t_next = self.t0 + (self.step_index + 1) as f64 * dt;
        if let Some(bad) = first_non_finite(&self.next, d) {
            return Err(Error::BlowUp { particle: bad, time: t_next });
        }
        if tracking {
            if let Some(bad) = first_non_finite(&self.next_jac, dd) {
                return Err(Error::BlowUp { particle: bad, time: t_next });
            }
        }

        if let Some(tag) = self.tagged.as_mut() {
            let i = tag.index;
            let x = &states[i * d..(i + 1) * d];
            let inc = &incs[i * dw..(i + 1) * dw];
            let mut s = Scratch::new(d);
            let mut new_spatial = tag.spatial.clone();
            let mut new_measure = tag.measure.clone();
            for k in 0..=dw {
                let w = if k == 0 { dt } else { inc[k - 1] };
                model.dcoeff_x(k, x, &mu, &mut s.dxv);
                linalg::gemm(d, &s.dxv, &tag.spatial, &mut s.term);
                for (o, t) in new_spatial.iter_mut().zip(&s.term) {
                    *o += w * t;
                }
                linalg::gemm(d, &s.dxv, &tag.measure, &mut s.term);
                coupling_term(model, k, x, &mu, &caches, states, jac, n, &mut s.g, &mut s.coupling);
                for ((o, t), c) in new_measure.iter_mut().zip(&s.term).zip(&s.coupling) {
                    *o += w * (t + c);
                }
            }
            if new_spatial.iter().chain(&new_measure).any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { particle: i, time: t_next });
            }
            tag.spatial = new_spatial;
            tag.measure = new_measure;
        }

        drop(mu);
        std::mem::swap(&mut self.states, &mut self.next);
        if tracking {
            std::mem::swap(&mut self.jac, &mut self.next_jac);
            self.rescale();
        }
        self.step_index += 1;
        Ok(())
    }

    fn tracked_max_abs(&self) -> f64 {
        let mut m = linalg::max_abs(&self.jac);
        if let Some(tag) = &self.tagged {
            m = m.max(linalg::max_abs(&tag.spatial)).max(linalg::max_abs(&tag.measure));
        }
        m
    }

    /// Keep tracked Jacobians in range by an exact power-of-two rescale.
    fn rescale(&mut self) {
        let m = self.tracked_max_abs();
        if m == 0.0 || (m < (RESCALE_BITS as f64).exp2() && m > (-RESCALE_BITS as f64).exp2()) {
            return;
        }
        let e = m.log2().floor() as i64;
        self.scale_tracked_pow2(-e);
        self.log2_scale += e;
    }

    fn scale_tracked_pow2(&mut self, e: i64) {
        let f = (e as f64).exp2();
        let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= f);
        scale(&mut self.jac);
        if let Some(tag) = self.tagged.as_mut() {
            scale(&mut tag.spatial);
            scale(&mut tag.measure);
        }
    }

    /// Right-multiply every tracked Jacobian by `t` (d × d).
    pub fn right_multiply_tracked(&mut self, t: &[f64]) {
        let d = self.d;
        let dd = d * d;
        let apply = |m: &mut [f64]| {
            let mut out = vec![0.0; dd];
            linalg::gemm(d, m, t, &mut out);
            m.copy_from_slice(&out);
        };
        if self.n >= PAR_MIN_PARTICLES {
            self.jac.par_chunks_mut(dd).for_each(apply);
        } else {
            self.jac.chunks_mut(dd).for_each(apply);
        }
        if let Some(tag) = self.tagged.as_mut() {
            apply(&mut tag.spatial);
            apply(&mut tag.measure);
        }
    }

    pub fn particle_jacobian(&self, i: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.jac[i * dd..(i + 1) * dd]
    }
}

fn first_non_finite(values: &[f64], width: usize) -> Option<usize> {
    values
        .iter()
        .position(|v| !v.is_finite())
        .map(|p| p / width.max(1))
}
