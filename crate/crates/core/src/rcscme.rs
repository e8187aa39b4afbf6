//! Rank-constrained spatial covariance matrix estimation.
//!
//! The observation model per bin i and frame j is
//!
//! ```text
//! x_ij = a_i s_ij + z_ij,   s_ij ~ N_c(0, r_t),   z_ij ~ N_c(0, r_n R_n,i)
//! r_t ~ InvGamma(alpha, beta)
//! ```
//!
//! with the full-rank noise SCM built from the rank-(M-1) matrix R'_i of the
//! preprocessing stage plus one deficient basis:
//!
//! * conventional: `R_n,i = R'_i + lambda_i b_i b_i^H` with `b_i = u_i` fixed,
//!   only the scale `lambda_i` is estimated;
//! * proposed: `R_n,i = R'_i + c_i c_i^H` with the vector `c_i` estimated.
//!
//! Both are fitted by MAP-EM with the target dry source and the noise image as
//! latent variables. For the vector variant, `R_n u = (c^H u) c` whenever
//! `R' u = 0`, so `R_n^{-1} c = u / (c^H u)`; substituting this in the
//! stationarity condition `c = T R_n^{-1} c` gives the closed form
//! `c = T u / sqrt(u^H T u)`.

use std::str::FromStr;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result, Stage};
use crate::linalg::{dot, eig_hermitian, norm, CMat, CVec, C64};
use crate::rank1::DemixingSet;
use crate::scm::NoiseScmBundle;
use crate::stft::Spectrogram;

/// Lower bound applied to r_n after every update and to the initial r_t.
/// Updated r_t needs no floor: it never drops below beta / (alpha + 2).
pub const VARIANCE_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Conventional,
    Proposed,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Conventional => "conventional",
            Variant::Proposed => "proposed",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Variant::Conventional),
            "proposed" => Ok(Variant::Proposed),
            other => Err(Error::invalid(Stage::Em, format!("unknown variant {other:?}"))),
        }
    }
}

/// Inverse-gamma prior on the target variance plus iteration budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub variant: Variant,
    pub n_iterations: usize,
}

impl PriorConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let alpha = match variant {
            Variant::Conventional => 2.5,
            Variant::Proposed => 0.1,
        };
        PriorConfig {
            alpha,
            beta: 1e-16,
            variant,
            n_iterations: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(Stage::Em, format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(Stage::Em, format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// ln InvGamma(r; alpha, beta)
    pub fn log_prior(&self, r: f64) -> f64 {
        self.alpha * self.beta.ln() - ln_gamma(self.alpha) - (self.alpha + 1.0) * r.ln() - self.beta / r
    }
}

/// Deficient basis completing R'_i to a full-rank SCM.
#[derive(Debug, Clone, PartialEq)]
pub enum DeficientBasis {
    /// lambda_i b_i b_i^H with fixed unit direction b_i.
    Scaled { lambda: Vec<f64>, direction: Vec<CVec> },
    /// c_i c_i^H with free c_i.
    Free(Vec<CVec>),
}

impl DeficientBasis {
    fn outer(&self, i: usize) -> CMat {
        match self {
            DeficientBasis::Scaled { lambda, direction } => {
                CMat::outer(&direction[i], &direction[i]).scale(lambda[i])
            }
            DeficientBasis::Free(c) => CMat::outer(&c[i], &c[i]),
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            DeficientBasis::Scaled { .. } => Variant::Conventional,
            DeficientBasis::Free(_) => Variant::Proposed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    /// Target variances r_ij^(t), `(bins, frames)`.
    pub r_t: Array2<f64>,
    /// Noise variances r_ij^(n), `(bins, frames)`.
    pub r_n: Array2<f64>,
    pub basis: DeficientBasis,
    /// Full-rank noise SCM R_i^(n).
    pub noise_scm: Vec<CMat>,
}

impl EmState {
    pub fn new(r_t: Array2<f64>, r_n: Array2<f64>, basis: DeficientBasis, r_prime: &[CMat]) -> Result<Self> {
        if r_t.dim() != r_n.dim() || r_t.nrows() != r_prime.len() {
            return Err(Error::invalid(Stage::Em, "state dimensions disagree"));
        }
        let noise_scm = r_prime
            .iter()
            .enumerate()
            .map(|(i, r)| (r + &basis.outer(i)).hermitize())
            .collect();
        Ok(EmState {
            r_t,
            r_n,
            basis,
            noise_scm,
        })
    }

    /// Initial state: r_t from the target estimate power, r_n = 1,
    /// lambda_i = sigma_i or c_i = sqrt(sigma_i) u_i.
    pub fn initial(bundle: &NoiseScmBundle, target_power: &Array2<f64>, variant: Variant) -> Result<Self> {
        let r_t = target_power.mapv(|p| p.max(VARIANCE_FLOOR));
        let r_n = Array2::ones(target_power.raw_dim());
        let basis = match variant {
            Variant::Conventional => DeficientBasis::Scaled {
                lambda: bundle.sigma_min_pos.clone(),
                direction: bundle.null_vector.clone(),
            },
            Variant::Proposed => DeficientBasis::Free(
                bundle
                    .null_vector
                    .iter()
                    .zip(&bundle.sigma_min_pos)
                    .map(|(u, s)| u.iter().map(|v| v * s.sqrt()).collect())
                    .collect(),
            ),
        };
        Self::new(r_t, r_n, basis, &bundle.r_prime)
    }

    pub fn n_bins(&self) -> usize {
        self.r_t.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.r_t.ncols()
    }

    /// Smallest eigenvalue of every R_i^(n).
    pub fn min_eigenvalues(&self) -> Result<Vec<f64>> {
        self.noise_scm
            .iter()
            .map(|r| eig_hermitian(r).map(|e| e.values[0]))
            .collect()
    }
}

/// Posterior statistics from one E-step.
///
/// Given x, the noise image is x - a s, so its second moment is
/// var(s) a a^H + m m^H with m = x - a E[s]. Only E[s], var(s) and m are
/// stored and R-hat^(n) is formed on demand.
#[derive(Debug, Clone)]
pub struct PosteriorStats {
    /// r-hat_ij^(t), `(bins, frames)`.
    pub r_hat_t: Array2<f64>,
    /// Posterior mean of the target source, `(bins, frames)`.
    pub source_mean: Array2<C64>,
    source_var: Array2<f64>,
    /// Posterior mean of the noise image, row-major over `(bin, frame)`.
    noise_mean: Vec<CVec>,
    steering: Vec<CVec>,
    /// T-hat_i = (1/J) sum_j R-hat_ij^(n) / r_ij^(n).
    pub t_hat: Vec<CMat>,
    /// ln p(X; state) of the state the statistics were computed from.
    pub log_likelihood: f64,
    n_frames: usize,
}

impl PosteriorStats {
    /// R-hat_ij^(n).
    pub fn r_hat_n(&self, bin: usize, frame: usize) -> CMat {
        let a = &self.steering[bin];
        let m = &self.noise_mean[bin * self.n_frames + frame];
        let mut out = CMat::outer(m, m);
        out.add_outer(self.source_var[[bin, frame]], a, a);
        out.hermitize()
    }

    /// Re tr(B R-hat_ij^(n)) for Hermitian B.
    fn trace_with(&self, b: &CMat, bin: usize, frame: usize) -> f64 {
        self.source_var[[bin, frame]] * b.quad(&self.steering[bin]) + b.quad(&self.noise_mean[bin * self.n_frames + frame])
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Multichannel Wiener estimate of the target image, E[s] a.
    pub fn target_image(&self, x: &Spectrogram) -> Result<Spectrogram> {
        let (n_bins, n_frames, n_ch) = x.data.dim();
        if self.source_mean.dim() != (n_bins, n_frames) || self.steering.first().is_some_and(|a| a.len() != n_ch) {
            return Err(Error::invalid(Stage::Em, "statistics do not match the observation"));
        }
        let out = Array3::from_shape_fn((n_bins, n_frames, n_ch), |(i, j, m)| self.steering[i][m] * self.source_mean[[i, j]]);
        Ok(x.with_data(out))
    }

    /// Target image at one microphone, `(bins, frames)`.
    pub fn target_channel(&self, channel: usize) -> Result<Array2<C64>> {
        if self.steering.first().is_some_and(|a| channel >= a.len()) {
            return Err(Error::invalid(Stage::Em, format!("channel {channel} out of range")));
        }
        Ok(Array2::from_shape_fn(self.source_mean.dim(), |(i, j)| self.steering[i][channel] * self.source_mean[[i, j]]))
    }
}

fn check_inputs(x: &Spectrogram, steering: &[CVec], state: &EmState) -> Result<()> {
    let (n_bins, n_frames, n_ch) = x.data.dim();
    if steering.len() != n_bins || state.n_bins() != n_bins || state.n_frames() != n_frames {
        return Err(Error::invalid(Stage::Em, "observation, steering and state dimensions disagree"));
    }
    if steering.iter().any(|a| a.len() != n_ch) || state.noise_scm.iter().any(|r| r.dim() != n_ch) {
        return Err(Error::invalid(Stage::Em, "channel count mismatch"));
    }
    Ok(())
}

/// Per-bin factorization of R_n,i shared by every frame of the bin. The
/// mixture covariance r_t a a^H + r_n R_n is a rank-1 update of r_n R_n, so
/// per-frame quantities follow from R_n^{-1} without another factorization.
struct BinSolver {
    inv: CMat,
    log_det: f64,
    inv_a: CVec,
    kappa: f64,
}

struct FramePosterior {
    /// Posterior mean of the target source.
    source_mean: C64,
    /// Posterior variance of the target source.
    source_var: f64,
    log_likelihood: f64,
}

impl BinSolver {
    fn new(noise: &CMat, a: &[C64], bin: usize) -> Result<Self> {
        let chol = noise.cholesky().map_err(|_| {
            Error::numerical(Stage::Em, format!("noise SCM of bin {bin} is not positive definite"))
        })?;
        let inv_a = chol.solve_vec(a);
        let kappa = dot(a, &inv_a).re;
        Ok(BinSolver {
            inv: chol.inverse(),
            log_det: chol.log_det(),
            inv_a,
            kappa,
        })
    }

    fn frame(&self, x: &[C64], a: &[C64], r_t: f64, r_n: f64) -> FramePosterior {
        let m = x.len() as f64;
        let rho = r_t / r_n;
        let d = 1.0 + rho * self.kappa;
        let g = dot(&self.inv_a, x);
        // x^H Rx^{-1} x split into the part orthogonal to a in the R_n^{-1}
        // metric and the part along a, which avoids cancellation for small r_n.
        let (perp, along) = if self.kappa > 0.0 {
            let coef = g / self.kappa;
            let e: CVec = x.iter().zip(a).map(|(xv, av)| xv - av * coef).collect();
            (self.inv.quad(&e), g.norm_sqr() / (self.kappa * d))
        } else {
            (self.inv.quad(x), 0.0)
        };
        let log_likelihood = -m * std::f64::consts::PI.ln() - m * r_n.ln() - self.log_det - d.ln() - (perp + along) / r_n;
        FramePosterior {
            source_mean: g * (rho / d),
            source_var: r_t / d,
            log_likelihood,
        }
    }
}

/// Posterior second moments of the target source and noise image under the
/// current parameters.
pub fn e_step(x: &Spectrogram, steering: &[CVec], state: &EmState) -> Result<PosteriorStats> {
    check_inputs(x, steering, state)?;
    let (n_bins, n_frames, n_ch) = x.data.dim();
    struct BinStats {
        mean: Vec<C64>,
        var: Vec<f64>,
        noise_mean: Vec<CVec>,
        t_hat: CMat,
        ll: f64,
    }
    let per_bin: Vec<BinStats> = (0..n_bins)
        .into_par_iter()
        .map(|i| {
            let a = &steering[i];
            let solver = BinSolver::new(&state.noise_scm[i], a, i)?;
            let mut out = BinStats {
                mean: Vec::with_capacity(n_frames),
                var: Vec::with_capacity(n_frames),
                noise_mean: Vec::with_capacity(n_frames),
                t_hat: CMat::zeros(n_ch),
                ll: 0.0,
            };
            let mut a_weight = 0.0;
            for j in 0..n_frames {
                let r_n = state.r_n[[i, j]];
                let x_ij = x.vector(i, j);
                let post = solver.frame(&x_ij, a, state.r_t[[i, j]], r_n);
                let m: CVec = x_ij.iter().zip(a.iter()).map(|(xv, av)| xv - av * post.source_mean).collect();
                out.t_hat.add_outer(1.0 / r_n, &m, &m);
                a_weight += post.source_var / r_n;
                out.mean.push(post.source_mean);
                out.var.push(post.source_var);
                out.noise_mean.push(m);
                out.ll += post.log_likelihood;
            }
            out.t_hat.add_outer(a_weight, a, a);
            out.t_hat = out.t_hat.scale(1.0 / n_frames as f64).hermitize();
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut source_mean = Array2::zeros((n_bins, n_frames));
    let mut source_var = Array2::zeros((n_bins, n_frames));
    let mut noise_mean = Vec::with_capacity(n_bins * n_frames);
    let mut t_hat = Vec::with_capacity(n_bins);
    let mut log_likelihood = 0.0;
    for (i, b) in per_bin.into_iter().enumerate() {
        for (j, (m, v)) in b.mean.into_iter().zip(b.var).enumerate() {
            source_mean[[i, j]] = m;
            source_var[[i, j]] = v;
        }
        noise_mean.extend(b.noise_mean);
        t_hat.push(b.t_hat);
        log_likelihood += b.ll;
    }
    let r_hat_t = Array2::from_shape_fn((n_bins, n_frames), |(i, j)| source_var[[i, j]] + source_mean[[i, j]].norm_sqr());
    Ok(PosteriorStats {
        r_hat_t,
        source_mean,
        source_var,
        noise_mean,
        steering: steering.to_vec(),
        t_hat,
        log_likelihood,
        n_frames,
    })
}

fn check_stats(stats: &PosteriorStats, bundle: &NoiseScmBundle, state: &EmState) -> Result<()> {
    if stats.r_hat_t.dim() != state.r_t.dim() || bundle.n_bins() != state.n_bins() {
        return Err(Error::invalid(Stage::Em, "statistics, bundle and state dimensions disagree"));
    }
    Ok(())
}

fn update_target_variance(stats: &PosteriorStats, prior: &PriorConfig) -> Array2<f64> {
    let denom = prior.alpha + 2.0;
    stats.r_hat_t.mapv(|r| (r.max(0.0) + prior.beta) / denom)
}

/// r_n,ij = tr(R_n,i^{-1} R-hat_ij) / M with the updated R_n.
fn update_noise_variance(stats: &PosteriorStats, noise_scm: &[CMat]) -> Result<Array2<f64>> {
    let n_frames = stats.n_frames;
    let mut r_n = Array2::zeros((noise_scm.len(), n_frames));
    for (i, r) in noise_scm.iter().enumerate() {
        let m = r.dim();
        let inv = r
            .cholesky()
            .map_err(|_| Error::numerical(Stage::Em, format!("noise SCM of bin {i} lost positive definiteness")))?
            .inverse();
        for j in 0..n_frames {
            r_n[[i, j]] = (stats.trace_with(&inv, i, j) / m as f64).max(VARIANCE_FLOOR);
        }
    }
    Ok(r_n)
}

fn check_positive_definite(noise_scm: &[CMat]) -> Result<()> {
    for (i, r) in noise_scm.iter().enumerate() {
        let min = eig_hermitian(r)?.values[0];
        if !(min > 0.0) {
            return Err(Error::numerical(
                Stage::Em,
                format!("noise SCM of bin {i} is not positive definite (min eigenvalue {min:e})"),
            ));
        }
    }
    Ok(())
}

/// Scale-only M-step: lambda_i = u^H T u / |b^H u|^2.
pub fn m_step_conventional(stats: &PosteriorStats, bundle: &NoiseScmBundle, prior: &PriorConfig, state: &EmState) -> Result<EmState> {
    check_stats(stats, bundle, state)?;
    let DeficientBasis::Scaled { direction, .. } = &state.basis else {
        return Err(Error::invalid(Stage::Em, "conventional M-step needs a scaled basis"));
    };
    let r_t = update_target_variance(stats, prior);
    let mut lambda = Vec::with_capacity(bundle.n_bins());
    for (i, (u, b)) in bundle.null_vector.iter().zip(direction).enumerate() {
        let proj = dot(b, u).norm_sqr();
        if !(proj > 1e-24) {
            return Err(Error::numerical(Stage::Em, format!("basis of bin {i} is orthogonal to the null vector")));
        }
        let l = stats.t_hat[i].quad(u) / proj;
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::numerical(Stage::Em, format!("non-positive basis scale {l:e} at bin {i}")));
        }
        lambda.push(l);
    }
    let basis = DeficientBasis::Scaled {
        lambda,
        direction: direction.clone(),
    };
    finish_m_step(stats, bundle, r_t, basis)
}

/// Vector M-step: c_i = T_i u_i / sqrt(u_i^H T_i u_i).
pub fn m_step_proposed(stats: &PosteriorStats, bundle: &NoiseScmBundle, prior: &PriorConfig, state: &EmState) -> Result<EmState> {
    check_stats(stats, bundle, state)?;
    let r_t = update_target_variance(stats, prior);
    let c = bundle
        .null_vector
        .iter()
        .zip(&stats.t_hat)
        .enumerate()
        .map(|(i, (u, t))| basis_vector_update(t, u).map_err(|e| match e {
            Error::Numerical { msg, .. } => Error::numerical(Stage::Em, format!("bin {i}: {msg}")),
            other => other,
        }))
        .collect::<Result<Vec<_>>>()?;
    finish_m_step(stats, bundle, r_t, DeficientBasis::Free(c))
}

/// Closed-form stationary point T u / sqrt(u^H T u).
pub fn basis_vector_update(t_hat: &CMat, u: &[C64]) -> Result<CVec> {
    let s = t_hat.quad(u);
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::numerical(Stage::Em, format!("u^H T u = {s:e} is not positive")));
    }
    let scale = 1.0 / s.sqrt();
    Ok(t_hat.mul_vec(u).iter().map(|v| v * scale).collect())
}

fn finish_m_step(stats: &PosteriorStats, bundle: &NoiseScmBundle, r_t: Array2<f64>, basis: DeficientBasis) -> Result<EmState> {
    let placeholder = Array2::zeros(r_t.raw_dim());
    let mut next = EmState::new(r_t, placeholder, basis, &bundle.r_prime)?;
    check_positive_definite(&next.noise_scm)?;
    next.r_n = update_noise_variance(stats, &next.noise_scm)?;
    Ok(next)
}

pub fn m_step(stats: &PosteriorStats, bundle: &NoiseScmBundle, prior: &PriorConfig, state: &EmState) -> Result<EmState> {
    match prior.variant {
        Variant::Conventional => m_step_conventional(stats, bundle, prior, state),
        Variant::Proposed => m_step_proposed(stats, bundle, prior, state),
    }
}

/// ‖(R' + c c^H)^{-1} c - u / (c^H u)‖
pub fn claim1_identity(r_prime: &CMat, c: &[C64], u: &[C64]) -> Result<f64> {
    let chu = dot(c, u);
    if chu.norm() <= 1e-14 * norm(c) * norm(u) {
        return Err(Error::invalid(Stage::Em, "c lies in the column space of R' (c^H u = 0)"));
    }
    let mut full = r_prime.clone();
    full.add_outer(1.0, c, c);
    let lhs = full
        .hermitize()
        .cholesky()
        .map_err(|_| Error::numerical(Stage::Em, "R' + c c^H is singular"))?
        .solve_vec(c);
    let rhs: CVec = u.iter().map(|v| v / chu).collect();
    Ok(norm(&crate::linalg::sub_vec(&lhs, &rhs)))
}

/// Expected complete-data log posterior, constants dropped.
pub fn q_function(state: &EmState, stats: &PosteriorStats, prior: &PriorConfig) -> Result<f64> {
    if stats.r_hat_t.dim() != state.r_t.dim() {
        return Err(Error::invalid(Stage::Em, "statistics and state dimensions disagree"));
    }
    let (n_bins, n_frames) = state.r_t.dim();
    let mut total = 0.0;
    for i in 0..n_bins {
        let r = &state.noise_scm[i];
        let m = r.dim() as f64;
        let chol = r
            .cholesky()
            .map_err(|_| Error::numerical(Stage::Em, format!("noise SCM of bin {i} is not positive definite")))?;
        let log_det = chol.log_det();
        let inv = chol.inverse();
        for j in 0..n_frames {
            let r_t = state.r_t[[i, j]];
            let r_n = state.r_n[[i, j]];
            total += -(prior.alpha + 2.0) * r_t.ln() - m * r_n.ln() - log_det
                - (stats.r_hat_t[[i, j]] + prior.beta) / r_t
                - stats.trace_with(&inv, i, j) / r_n;
        }
    }
    Ok(total)
}

/// Analytic Wirtinger gradient of Q with respect to c_i^*, valid when the
/// noise variances equal those the statistics were computed with:
/// -J R_n^{-1} c + J R_n^{-1} T R_n^{-1} c.
pub fn q_gradient_c(noise_scm: &CMat, c: &[C64], t_hat: &CMat, n_frames: usize) -> Result<CVec> {
    let chol = noise_scm
        .cholesky()
        .map_err(|_| Error::numerical(Stage::Em, "noise SCM is not positive definite"))?;
    let rc = chol.solve_vec(c);
    let trc = t_hat.mul_vec(&rc);
    let rtrc = chol.solve_vec(&trc);
    let j = n_frames as f64;
    Ok(rc.iter().zip(&rtrc).map(|(a, b)| (b - a) * j).collect())
}

/// ln p(X; state) + ln p(r_t), the quantity MAP-EM increases.
pub fn map_objective(x: &Spectrogram, steering: &[CVec], state: &EmState, prior: &PriorConfig) -> Result<f64> {
    check_inputs(x, steering, state)?;
    let (n_bins, n_frames, _) = x.data.dim();
    let per_bin = (0..n_bins)
        .into_par_iter()
        .map(|i| {
            let solver = BinSolver::new(&state.noise_scm[i], &steering[i], i)?;
            Ok((0..n_frames)
                .map(|j| {
                    solver
                        .frame(&x.vector(i, j), &steering[i], state.r_t[[i, j]], state.r_n[[i, j]])
                        .log_likelihood
                })
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_bin.iter().sum::<f64>() + log_prior_sum(state, prior))
}

fn log_prior_sum(state: &EmState, prior: &PriorConfig) -> f64 {
    state.r_t.iter().map(|&r| prior.log_prior(r)).sum()
}

/// Posterior means of the target image and the noise image for one frame.
pub fn posterior_means(x: &[C64], a: &[C64], r_t: f64, r_n: f64, noise: &CMat) -> Result<(CVec, CVec)> {
    let mut cov = noise.scale(r_n);
    cov.add_outer(r_t, a, a);
    let inv_x = cov
        .cholesky()
        .map_err(|_| Error::numerical(Stage::Em, "mixture covariance is singular"))?
        .solve_vec(x);
    let gain = dot(a, &inv_x) * r_t;
    let target = a.iter().map(|v| v * gain).collect();
    let noise_img = noise.mul_vec(&inv_x).iter().map(|v| v * r_n).collect();
    Ok((target, noise_img))
}

/// Multichannel Wiener estimate of the target image,
/// r_t a a^H (r_t a a^H + r_n R_n)^{-1} x.
pub fn wiener_extract(x: &Spectrogram, steering: &[CVec], state: &EmState) -> Result<Spectrogram> {
    let gains = source_means(x, steering, state)?;
    let (n_bins, n_frames, n_ch) = x.data.dim();
    let out = Array3::from_shape_fn((n_bins, n_frames, n_ch), |(i, j, m)| steering[i][m] * gains[[i, j]]);
    Ok(x.with_data(out))
}

/// Posterior mean r_t a^H Rx^{-1} x of the target source per bin and frame.
fn source_means(x: &Spectrogram, steering: &[CVec], state: &EmState) -> Result<Array2<C64>> {
    check_inputs(x, steering, state)?;
    let (n_bins, n_frames, _) = x.data.dim();
    let rows = (0..n_bins)
        .into_par_iter()
        .map(|i| {
            let solver = BinSolver::new(&state.noise_scm[i], &steering[i], i)?;
            Ok((0..n_frames)
                .map(|j| {
                    solver
                        .frame(&x.vector(i, j), &steering[i], state.r_t[[i, j]], state.r_n[[i, j]])
                        .source_mean
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_fn((n_bins, n_frames), |(i, j)| rows[i][j]))
}

/// Per-iteration record of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Q of the updated parameters against the statistics they were fitted
    /// to; `None` for the initial state.
    pub q_value: Option<f64>,
    /// Q of the previous parameters against the same statistics.
    pub q_previous: Option<f64>,
    pub map_objective: f64,
    /// Smallest eigenvalue over all R_i^(n).
    pub min_eigenvalue: f64,
}

impl IterationDiagnostics {
    pub const CSV_HEADER: &'static str = "iteration,q_value,map_objective,min_eigenvalue";

    pub fn csv_row(&self) -> String {
        let q = self.q_value.map_or(String::new(), |q| format!("{q:.12e}"));
        format!(
            "{},{},{:.12e},{:.12e}",
            self.iteration, q, self.map_objective, self.min_eigenvalue
        )
    }
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub state: EmState,
    /// Entry 0 describes the initial state.
    pub diagnostics: Vec<IterationDiagnostics>,
    pub extracted: Spectrogram,
}

/// |w_{i,n_t}^H x_ij|^2, the power of the target estimate.
pub fn target_power(x: &Spectrogram, demix: &DemixingSet, target: usize) -> Result<Array2<f64>> {
    let (n_bins, n_frames, n_ch) = x.data.dim();
    if demix.n_bins() != n_bins || demix.n_channels() != n_ch || target >= n_ch {
        return Err(Error::invalid(Stage::Em, "demixing set or target index does not match the input"));
    }
    Ok(Array2::from_shape_fn((n_bins, n_frames), |(i, j)| {
        let w = demix.demix[i].row(target);
        let xv = x.vector(i, j);
        w.iter().zip(&xv).map(|(a, b)| a * b).sum::<C64>().norm_sqr()
    }))
}

/// Initializes from the preprocessing output and runs the EM iterations.
pub fn run(x: &Spectrogram, demix: &DemixingSet, target: usize, bundle: &NoiseScmBundle, prior: &PriorConfig) -> Result<EmRun> {
    run_with_observer(x, demix, target, bundle, prior, |_, _, _| Ok(()))
}

pub fn run_with_observer(
    x: &Spectrogram,
    demix: &DemixingSet,
    target: usize,
    bundle: &NoiseScmBundle,
    prior: &PriorConfig,
    observer: impl FnMut(usize, &EmState, &PosteriorStats) -> Result<()>,
) -> Result<EmRun> {
    let power = target_power(x, demix, target)?;
    let init = EmState::initial(bundle, &power, prior.variant)?;
    run_from_state(x, bundle, prior, init, observer)
}

/// Runs `prior.n_iterations` EM iterations from `init`, calling `observer`
/// with every state including the initial one (iteration 0) and the
/// posterior statistics of that state.
pub fn run_from_state(
    x: &Spectrogram,
    bundle: &NoiseScmBundle,
    prior: &PriorConfig,
    init: EmState,
    mut observer: impl FnMut(usize, &EmState, &PosteriorStats) -> Result<()>,
) -> Result<EmRun> {
    prior.validate()?;
    if init.basis.variant() != prior.variant {
        return Err(Error::invalid(Stage::Em, "initial basis does not match the variant"));
    }
    let steering = &bundle.steering;
    let mut state = init;
    let min_eig = |s: &EmState| -> Result<f64> {
        Ok(s.min_eigenvalues()?.into_iter().fold(f64::INFINITY, f64::min))
    };
    let mut stats = e_step(x, steering, &state)?;
    let mut diagnostics = vec![IterationDiagnostics {
        iteration: 0,
        q_value: None,
        q_previous: None,
        map_objective: stats.log_likelihood + log_prior_sum(&state, prior),
        min_eigenvalue: min_eig(&state)?,
    }];
    observer(0, &state, &stats)?;

    for iteration in 1..=prior.n_iterations {
        let next = m_step(&stats, bundle, prior, &state)?;
        let q_previous = q_function(&state, &stats, prior)?;
        let q_value = q_function(&next, &stats, prior)?;
        state = next;
        stats = e_step(x, steering, &state)?;
        diagnostics.push(IterationDiagnostics {
            iteration,
            q_value: Some(q_value),
            q_previous: Some(q_previous),
            map_objective: stats.log_likelihood + log_prior_sum(&state, prior),
            min_eigenvalue: min_eig(&state)?,
        });
        observer(iteration, &state, &stats)?;
    }
    let extracted = stats.target_image(x)?;
    Ok(EmRun {
        state,
        diagnostics,
        extracted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::FrameConfig;
    use rand::Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn single(x: &[C64]) -> Spectrogram {
        let data = Array3::from_shape_fn((1, 1, x.len()), |(_, _, m)| x[m]);
        Spectrogram {
            data,
            config: FrameConfig::default(),
            n_samples: 0,
        }
    }

    fn state_1x1(r_t: f64, r_n: f64, r_prime: CMat, basis: DeficientBasis) -> EmState {
        EmState::new(
            Array2::from_elem((1, 1), r_t),
            Array2::from_elem((1, 1), r_n),
            basis,
            &[r_prime],
        )
        .unwrap()
    }

    fn random_vec(rng: &mut impl Rng, m: usize) -> CVec {
        (0..m).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn e_step_matches_direct_conditional_gaussian() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let m = 2 + trial % 3;
            let x = random_vec(&mut rng, m);
            let a = random_vec(&mut rng, m);
            let mut r_prime = CMat::identity(m).scale(0.1);
            for _ in 0..m {
                let v = random_vec(&mut rng, m);
                r_prime.add_outer(1.0, &v, &v);
            }
            let c_vec = random_vec(&mut rng, m);
            let r_t = 10f64.powf(rng.random_range(-3.0..1.0));
            let r_n = 10f64.powf(rng.random_range(-3.0..1.0));
            let state = state_1x1(r_t, r_n, r_prime.clone(), DeficientBasis::Free(vec![c_vec]));
            let stats = e_step(&single(&x), &[a.clone()], &state).unwrap();

            // Direct evaluation with Rx = r_t a a^H + r_n R_n.
            let noise = &state.noise_scm[0];
            let mut rx = noise.scale(r_n);
            rx.add_outer(r_t, &a, &a);
            let rx_inv = rx.inverse().unwrap();
            let inv_a = rx_inv.mul_vec(&a);
            let inv_x = rx_inv.mul_vec(&x);
            let r_hat_t = r_t - r_t * r_t * dot(&a, &inv_a).re + (dot(&a, &inv_x) * r_t).norm_sqr();
            let mut r_hat_n = noise.scale(r_n);
            r_hat_n.add_scaled(-r_n * r_n, &(&(noise * &rx_inv) * noise));
            let mean = noise.mul_vec(&inv_x);
            r_hat_n.add_outer(r_n * r_n, &mean, &mean);
            let ll = -(m as f64) * std::f64::consts::PI.ln() - rx.det().re.ln() - dot(&x, &inv_x).re;

            assert!((stats.r_hat_t[[0, 0]] - r_hat_t).abs() <= 1e-9 * r_hat_t.abs().max(1.0));
            let scale = r_hat_n.frobenius().max(1.0);
            assert!(stats.r_hat_n(0, 0).max_abs_diff(&r_hat_n) <= 1e-9 * scale);
            assert!((stats.log_likelihood - ll).abs() <= 1e-8 * ll.abs().max(1.0));
        }
    }

    #[test]
    fn default_priors() {
        let conv = PriorConfig::for_variant(Variant::Conventional);
        assert_eq!((conv.alpha, conv.beta, conv.n_iterations), (2.5, 1e-16, 200));
        let prop = PriorConfig::for_variant(Variant::Proposed);
        assert_eq!((prop.alpha, prop.beta), (0.1, 1e-16));
        let bad = PriorConfig { alpha: 0.0, ..conv };
        assert!(bad.validate().is_err());
        let bad = PriorConfig { beta: -1.0, ..conv };
        assert!(bad.validate().is_err());
        assert!("proposed".parse::<Variant>().is_ok());
        assert!("fast".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_target_variance_gives_zero_second_moment() {
        let x = [c(0.3, -1.0), c(2.0, 0.5)];
        let a: CVec = [c(1.0, 0.0), c(0.2, 0.1)].into_iter().collect();
        let state = state_1x1(0.0, 1.0, CMat::diag(&[1.0, 0.0]), DeficientBasis::Free(vec![[c(0.0, 0.0), c(1.0, 0.0)].into_iter().collect()]));
        let stats = e_step(&single(&x), &[a], &state).unwrap();
        assert_eq!(stats.r_hat_t[[0, 0]], 0.0);
    }

    #[test]
    fn scalar_reduction_matches_conditional_gaussian() {
        let x = c(1.3, -0.4);
        let (rt, rn) = (0.7, 0.2);
        let a: CVec = [c(1.0, 0.0)].into_iter().collect();
        let state = state_1x1(rt, rn, CMat::zeros(1), DeficientBasis::Free(vec![[c(1.0, 0.0)].into_iter().collect()]));
        let stats = e_step(&single(&[x]), &[a], &state).unwrap();
        let expected = rt - rt * rt / (rt + rn) + (x * rt / (rt + rn)).norm_sqr();
        assert!((stats.r_hat_t[[0, 0]] - expected).abs() < 1e-14);
        let expected_n = rn - rn * rn / (rt + rn) + (x * rn / (rt + rn)).norm_sqr();
        assert!((stats.r_hat_n(0, 0)[(0, 0)].re - expected_n).abs() < 1e-14);
    }

    #[test]
    fn conventional_prior_floor_value() {
        // r-hat = 0 with alpha = 2.5, beta = 1e-16: (0 + 1e-16) / 4.5
        let prior = PriorConfig::for_variant(Variant::Conventional);
        let stats = stats_1x1(0.0, CMat::identity(2));
        let rt = update_target_variance(&stats, &prior);
        assert!((rt[[0, 0]] - 2.2222222222222e-17).abs() < 1e-29);
    }

    /// One bin and frame with a zero source mean, so r-hat^(t) is the
    /// source variance and R-hat^(n) = r-hat^(t) e_1 e_1^H.
    fn stats_1x1(r_hat_t: f64, t_hat: CMat) -> PosteriorStats {
        let n = t_hat.dim();
        let mut e1: CVec = (0..n).map(|_| c(0.0, 0.0)).collect();
        e1[0] = c(1.0, 0.0);
        PosteriorStats {
            r_hat_t: Array2::from_elem((1, 1), r_hat_t),
            source_mean: Array2::zeros((1, 1)),
            source_var: Array2::from_elem((1, 1), r_hat_t),
            noise_mean: vec![(0..n).map(|_| c(0.0, 0.0)).collect()],
            steering: vec![e1],
            t_hat: vec![t_hat],
            log_likelihood: 0.0,
            n_frames: 1,
        }
    }

    fn bundle_2x2() -> NoiseScmBundle {
        NoiseScmBundle::from_parts(vec![CMat::diag(&[1.0, 0.0])], vec![[c(1.0, 0.0), c(0.5, 0.0)].into_iter().collect()]).unwrap()
    }

    fn stats_with(t_hat: CMat) -> PosteriorStats {
        stats_1x1(1.0, t_hat)
    }

    #[test]
    fn conventional_lambda_hand_case() {
        let bundle = bundle_2x2();
        let u = bundle.null_vector[0].clone();
        assert!((u[1] - c(1.0, 0.0)).norm() < 1e-14);
        let state = state_1x1(1.0, 1.0, bundle.r_prime[0].clone(), DeficientBasis::Scaled { lambda: vec![1.0], direction: vec![u.clone()] });
        let t = CMat::from_rows(&[&[c(2.0, 0.0), c(0.1, 0.0)], &[c(0.1, 0.0), c(3.0, 0.0)]]);
        let prior = PriorConfig::for_variant(Variant::Conventional);
        let next = m_step_conventional(&stats_with(t), &bundle, &prior, &state).unwrap();
        let DeficientBasis::Scaled { lambda, .. } = &next.basis else { panic!() };
        assert!((lambda[0] - 3.0).abs() < 1e-14);
        let next = m_step_conventional(&stats_with(CMat::identity(2)), &bundle, &prior, &state).unwrap();
        let DeficientBasis::Scaled { lambda, .. } = &next.basis else { panic!() };
        assert!((lambda[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn proposed_update_hand_cases() {
        let u: CVec = [c(0.0, 0.0), c(1.0, 0.0)].into_iter().collect();
        let cvec = basis_vector_update(&CMat::diag(&[2.0, 3.0]), &u).unwrap();
        assert!(cvec[0].norm() < 1e-15);
        assert!((cvec[1] - c(3f64.sqrt(), 0.0)).norm() < 1e-14);
        assert!((dot(&cvec, &u).re - 3f64.sqrt()).abs() < 1e-14);
        let same = basis_vector_update(&CMat::identity(2), &u).unwrap();
        assert_eq!(same, u);
        assert!(basis_vector_update(&CMat::diag(&[1.0, 0.0]), &u).is_err());
    }

    #[test]
    fn claim1_hand_cases() {
        let r = CMat::diag(&[1.0, 0.0]);
        let u = [c(0.0, 0.0), c(1.0, 0.0)];
        let cv = [c(0.0, 0.0), c(2.0, 0.0)];
        assert!(claim1_identity(&r, &cv, &u).unwrap() < 1e-15);
        assert!(claim1_identity(&r, &u, &u).unwrap() < 1e-15);
        let in_span = [c(1.0, 0.0), c(0.0, 0.0)];
        assert!(claim1_identity(&r, &in_span, &u).is_err());
    }

    #[test]
    fn q_degenerate_scalar() {
        // M = 1, R_n = 1, r_n = 1, r-hat = 0, tiny beta: -(alpha+2) ln r_t
        let prior = PriorConfig {
            alpha: 1.5,
            beta: 1e-300,
            variant: Variant::Proposed,
            n_iterations: 1,
        };
        let rt = 0.37;
        let state = state_1x1(rt, 1.0, CMat::zeros(1), DeficientBasis::Free(vec![[c(1.0, 0.0)].into_iter().collect()]));
        let stats = stats_1x1(0.0, CMat::zeros(1));
        let q = q_function(&state, &stats, &prior).unwrap();
        assert!((q + 3.5 * rt.ln()).abs() < 1e-12);
    }

    #[test]
    fn wiener_zero_target() {
        let x = [c(1.0, 2.0), c(-0.5, 0.1)];
        let a: CVec = [c(1.0, 0.0), c(0.3, 0.3)].into_iter().collect();
        let state = state_1x1(0.0, 1.0, CMat::diag(&[1.0, 0.0]), DeficientBasis::Free(vec![[c(0.0, 0.0), c(1.0, 0.0)].into_iter().collect()]));
        let out = wiener_extract(&single(&x), &[a], &state).unwrap();
        assert!(out.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn mstep_rejects_wrong_basis_kind() {
        let bundle = bundle_2x2();
        let state = state_1x1(1.0, 1.0, bundle.r_prime[0].clone(), DeficientBasis::Free(vec![bundle.null_vector[0].clone()]));
        let prior = PriorConfig::for_variant(Variant::Conventional);
        assert!(m_step_conventional(&stats_with(CMat::identity(2)), &bundle, &prior, &state).is_err());
    }
}
