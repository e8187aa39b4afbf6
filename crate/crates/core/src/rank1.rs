//! Rank-1 preprocessing: ILRMA demixing, back projection and kurtosis-based
//! target selection.
//!
//! The ILRMA variant here gives every source its own NMF variance model (no
//! basis partitioning) and updates the demixing rows with iterative projection.
//! Cost, per bin i and frame j with y_ij = W_i x_ij and model variance r_ij,n:
//!
//! ```text
//! sum_{i,j,n} ( |y_ij,n|^2 / r_ij,n + ln r_ij,n ) - 2 J sum_i ln |det W_i|
//! ```

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, Stage};
use crate::linalg::{CMat, CVec, C64};
use crate::stft::{Spectrogram, StftEngine};

const NMF_FLOOR: f64 = 1e-12;
const DEMIX_REG: f64 = 1e-12;

/// Per-bin demixing matrices and their inverses.
///
/// Row `m` of `demix[i]` is w_{i,m}^H; column `m` of `mixing[i]` is the
/// steering vector a_{i,m}.
#[derive(Debug, Clone, PartialEq)]
pub struct DemixingSet {
    pub demix: Vec<CMat>,
    pub mixing: Vec<CMat>,
}

impl DemixingSet {
    pub fn from_demix(demix: Vec<CMat>) -> Result<Self> {
        let mut mixing = Vec::with_capacity(demix.len());
        for (i, w) in demix.iter().enumerate() {
            let a = w
                .inverse()
                .map_err(|_| Error::numerical(Stage::Rank1, format!("demixing matrix of bin {i} is singular")))?;
            let err = (&a * w).max_abs_diff(&CMat::identity(w.dim()));
            if !(err <= 1e-8) {
                return Err(Error::numerical(
                    Stage::Rank1,
                    format!("demixing matrix of bin {i} is ill-conditioned (A W - I = {err:e})"),
                ));
            }
            mixing.push(a);
        }
        Ok(DemixingSet { demix, mixing })
    }

    pub fn identity(n_bins: usize, n_channels: usize) -> Self {
        DemixingSet {
            demix: vec![CMat::identity(n_channels); n_bins],
            mixing: vec![CMat::identity(n_channels); n_bins],
        }
    }

    pub fn n_bins(&self) -> usize {
        self.demix.len()
    }

    pub fn n_channels(&self) -> usize {
        self.demix.first().map_or(0, CMat::dim)
    }

    pub fn steering(&self, bin: usize, source: usize) -> CVec {
        self.mixing[bin].column(source)
    }

    /// y_ij = W_i x_ij for every bin and frame.
    pub fn apply(&self, x: &Spectrogram) -> Result<Spectrogram> {
        check_dims(x, self)?;
        let mut out = Array3::zeros(x.data.raw_dim());
        for i in 0..x.n_bins() {
            for j in 0..x.n_frames() {
                let y = self.demix[i].mul_vec(&x.vector(i, j));
                for (m, v) in y.into_iter().enumerate() {
                    out[[i, j, m]] = v;
                }
            }
        }
        Ok(x.with_data(out))
    }
}

fn check_dims(x: &Spectrogram, demix: &DemixingSet) -> Result<()> {
    if x.n_bins() != demix.n_bins() || x.n_channels() != demix.n_channels() {
        return Err(Error::invalid(
            Stage::Rank1,
            format!(
                "spectrogram is {}x{} channels but demixing set is {}x{}",
                x.n_bins(),
                x.n_channels(),
                demix.n_bins(),
                demix.n_channels()
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rank1Model {
    pub n_bases: usize,
    pub n_iterations: usize,
    pub seed: u64,
}

impl Default for Rank1Model {
    fn default() -> Self {
        Rank1Model {
            n_bases: 10,
            n_iterations: 50,
            seed: 0,
        }
    }
}

/// Per-source NMF variance model: `bases[n]` is `(bins, n_bases)`,
/// `activations[n]` is `(n_bases, frames)`.
#[derive(Debug, Clone)]
pub struct NmfModel {
    pub bases: Vec<Array2<f64>>,
    pub activations: Vec<Array2<f64>>,
}

impl NmfModel {
    fn variance(&self, n: usize) -> Array2<f64> {
        self.bases[n].dot(&self.activations[n]).mapv(|v| v.max(NMF_FLOOR))
    }
}

#[derive(Debug, Clone)]
pub struct IlrmaOutput {
    pub demix: DemixingSet,
    /// Demixed (not back-projected) estimates y_ij,m.
    pub estimates: Spectrogram,
    pub nmf: NmfModel,
    /// Cost before the first iteration followed by the cost after each one.
    pub cost_history: Vec<f64>,
}

pub fn run_ilrma(x: &Spectrogram, model: &Rank1Model) -> Result<IlrmaOutput> {
    let (n_bins, n_frames, n_ch) = x.data.dim();
    if n_ch < 2 {
        return Err(Error::invalid(Stage::Rank1, format!("need at least 2 channels, got {n_ch}")));
    }
    if n_frames < n_ch {
        return Err(Error::invalid(
            Stage::Rank1,
            format!("need at least as many frames as channels ({n_frames} < {n_ch})"),
        ));
    }
    if model.n_bases == 0 {
        return Err(Error::invalid(Stage::Rank1, "number of bases must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut nmf = NmfModel {
        bases: Vec::with_capacity(n_ch),
        activations: Vec::with_capacity(n_ch),
    };
    for _ in 0..n_ch {
        nmf.bases.push(Array2::from_shape_fn((n_bins, model.n_bases), |_| {
            rng.random::<f64>().max(NMF_FLOOR)
        }));
        nmf.activations.push(Array2::from_shape_fn((model.n_bases, n_frames), |_| {
            rng.random::<f64>().max(NMF_FLOOR)
        }));
    }

    let mut demix = vec![CMat::identity(n_ch); n_bins];
    // x_ij x_ij^H, reused by every demixing update
    let outer: Vec<CMat> = (0..n_bins * n_frames)
        .map(|k| {
            let v = x.vector(k / n_frames, k % n_frames);
            CMat::outer(&v, &v)
        })
        .collect();

    let mut y = Array3::<C64>::zeros((n_bins, n_frames, n_ch));
    let mut power: Vec<Array2<f64>> = vec![Array2::zeros((n_bins, n_frames)); n_ch];
    refresh_estimates(x, &demix, &mut y, &mut power);

    let mut cost_history = Vec::with_capacity(model.n_iterations + 1);
    cost_history.push(cost(&power, &nmf, &demix, n_frames));

    for _ in 0..model.n_iterations {
        for n in 0..n_ch {
            update_nmf(&power[n], &mut nmf, n);
            let var = nmf.variance(n);
            for (i, w) in demix.iter_mut().enumerate() {
                let mut u = CMat::zeros(n_ch);
                for j in 0..n_frames {
                    u.add_scaled(1.0 / var[[i, j]], &outer[i * n_frames + j]);
                }
                let mut u = u.scale(1.0 / n_frames as f64).hermitize();
                let reg = DEMIX_REG * (u.trace().re / n_ch as f64).max(f64::MIN_POSITIVE);
                for d in 0..n_ch {
                    u[(d, d)] += reg;
                }
                let wu = &*w * &u;
                let inv = wu.inverse().map_err(|_| {
                    Error::numerical(Stage::Rank1, format!("singular demixing update at bin {i}"))
                })?;
                // w_n = (W U)^{-1} e_n, normalized to unit U-norm
                let col = inv.column(n);
                let scale = u.quad(&col);
                if !(scale > 0.0) || !scale.is_finite() {
                    return Err(Error::numerical(
                        Stage::Rank1,
                        format!("degenerate demixing row at bin {i}"),
                    ));
                }
                let row: CVec = col.iter().map(|v| v.conj() / scale.sqrt()).collect();
                w.set_row(n, &row);
            }
            for i in 0..n_bins {
                let row = demix[i].row(n);
                for j in 0..n_frames {
                    let v: C64 = row.iter().zip(x.data.slice(ndarray::s![i, j, ..])).map(|(a, b)| a * b).sum();
                    y[[i, j, n]] = v;
                    power[n][[i, j]] = v.norm_sqr();
                }
            }
        }
        normalize_scales(&mut demix, &mut y, &mut power, &mut nmf);
        cost_history.push(cost(&power, &nmf, &demix, n_frames));
    }

    let demix = DemixingSet::from_demix(demix)?;
    Ok(IlrmaOutput {
        demix,
        estimates: x.with_data(y),
        nmf,
        cost_history,
    })
}

fn refresh_estimates(x: &Spectrogram, demix: &[CMat], y: &mut Array3<C64>, power: &mut [Array2<f64>]) {
    let (n_bins, n_frames, _) = x.data.dim();
    for i in 0..n_bins {
        for j in 0..n_frames {
            let v = demix[i].mul_vec(&x.vector(i, j));
            for (m, val) in v.into_iter().enumerate() {
                y[[i, j, m]] = val;
                power[m][[i, j]] = val.norm_sqr();
            }
        }
    }
}

/// Multiplicative majorization-minimization updates of one source's NMF.
fn update_nmf(power: &Array2<f64>, nmf: &mut NmfModel, n: usize) {
    let var = nmf.variance(n);
    let inv = var.mapv(|v| 1.0 / v);
    let weighted = power * &inv * &inv;
    let act_t = nmf.activations[n].t();
    let num = weighted.dot(&act_t);
    let den = inv.dot(&act_t);
    ndarray::Zip::from(&mut nmf.bases[n])
        .and(&num)
        .and(&den)
        .for_each(|t, &nu, &de| *t = (*t * (nu / de).sqrt()).max(NMF_FLOOR));

    let var = nmf.variance(n);
    let inv = var.mapv(|v| 1.0 / v);
    let weighted = power * &inv * &inv;
    let bases_t = nmf.bases[n].t();
    let num = bases_t.dot(&weighted);
    let den = bases_t.dot(&inv);
    ndarray::Zip::from(&mut nmf.activations[n])
        .and(&num)
        .and(&den)
        .for_each(|v, &nu, &de| *v = (*v * (nu / de).sqrt()).max(NMF_FLOOR));
}

/// Rescales each source to unit average power; leaves the cost unchanged.
fn normalize_scales(demix: &mut [CMat], y: &mut Array3<C64>, power: &mut [Array2<f64>], nmf: &mut NmfModel) {
    for n in 0..power.len() {
        let mean = power[n].mean().unwrap_or(0.0);
        if !(mean > 0.0) || !mean.is_finite() {
            continue;
        }
        let lambda = mean.sqrt();
        for w in demix.iter_mut() {
            let row: CVec = w.row(n).iter().map(|v| v / lambda).collect();
            w.set_row(n, &row);
        }
        y.index_axis_mut(Axis(2), n).mapv_inplace(|v| v / lambda);
        power[n].mapv_inplace(|v| v / mean);
        nmf.bases[n].mapv_inplace(|v| (v / mean).max(NMF_FLOOR));
    }
}

fn cost(power: &[Array2<f64>], nmf: &NmfModel, demix: &[CMat], n_frames: usize) -> f64 {
    let mut total = 0.0;
    for (n, p) in power.iter().enumerate() {
        let var = nmf.variance(n);
        total += ndarray::Zip::from(p)
            .and(&var)
            .fold(0.0, |acc, &pw, &r| acc + pw / r + r.ln());
    }
    let logdet: f64 = demix.iter().map(|w| w.det().norm().ln()).sum();
    total - 2.0 * n_frames as f64 * logdet
}

/// Maps the kept estimates back to the microphones: A_i (y_ij with the
/// entries outside `keep` zeroed).
pub fn back_project(estimates: &Spectrogram, demix: &DemixingSet, keep: &[usize]) -> Result<Spectrogram> {
    check_dims(estimates, demix)?;
    let n_ch = estimates.n_channels();
    if keep.is_empty() {
        return Err(Error::invalid(Stage::Rank1, "back projection needs at least one channel"));
    }
    if let Some(&bad) = keep.iter().find(|&&k| k >= n_ch) {
        return Err(Error::invalid(Stage::Rank1, format!("channel {bad} out of range")));
    }
    let mut mask = vec![false; n_ch];
    for &k in keep {
        mask[k] = true;
    }
    let mut out = Array3::zeros(estimates.data.raw_dim());
    for i in 0..estimates.n_bins() {
        let a = &demix.mixing[i];
        for j in 0..estimates.n_frames() {
            let mut y = estimates.vector(i, j);
            for (m, keep) in mask.iter().enumerate() {
                if !keep {
                    y[m] = C64::new(0.0, 0.0);
                }
            }
            for (m, v) in a.mul_vec(&y).into_iter().enumerate() {
                out[[i, j, m]] = v;
            }
        }
    }
    Ok(estimates.with_data(out))
}

/// Each estimate projected onto microphone `reference`: channel n of the
/// output is a_{i,n}[reference] * y_ij,n.
pub fn project_to_reference(estimates: &Spectrogram, demix: &DemixingSet, reference: usize) -> Result<Spectrogram> {
    check_dims(estimates, demix)?;
    if reference >= estimates.n_channels() {
        return Err(Error::invalid(Stage::Rank1, format!("reference channel {reference} out of range")));
    }
    let mut out = estimates.data.clone();
    for ((i, _, n), v) in out.indexed_iter_mut() {
        *v *= demix.mixing[i][(reference, n)];
    }
    Ok(estimates.with_data(out))
}

/// Excess kurtosis of real samples, `None` when the variance is zero.
pub fn excess_kurtosis(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (m2, m4) = samples.iter().fold((0.0, 0.0), |(m2, m4), &s| {
        let d = (s - mean) * (s - mean);
        (m2 + d, m4 + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if !(m2 > 0.0) {
        return None;
    }
    Some(m4 / (m2 * m2) - 3.0)
}

/// Index of the estimate whose time-domain signal has the largest excess
/// kurtosis; ties go to the lowest index.
pub fn select_target_channel(estimates: &Spectrogram) -> Result<usize> {
    let n_ch = estimates.n_channels();
    if n_ch < 2 {
        return Err(Error::invalid(Stage::Rank1, "target selection needs at least 2 estimates"));
    }
    let mut engine = StftEngine::new(estimates.config)?;
    let mut best: Option<(usize, f64)> = None;
    for m in 0..n_ch {
        let chan = estimates.data.index_axis(Axis(2), m);
        let signal = engine.synthesize_channel(chan, estimates.n_samples)?;
        if let Some(k) = excess_kurtosis(&signal) {
            if best.is_none_or(|(_, b)| k > b) {
                best = Some((m, k));
            }
        }
    }
    best.map(|(m, _)| m)
        .ok_or_else(|| Error::invalid(Stage::Rank1, "every estimate has zero variance"))
}
