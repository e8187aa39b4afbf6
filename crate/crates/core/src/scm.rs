//! Rank-(M-1) diffuse-noise spatial covariance built from the rank-1
//! preprocessing output.

use std::io::{self, Read, Write};

use crate::error::{Error, Result, Stage};
use crate::linalg::{eig_hermitian, CMat, CVec, C64};
use crate::rank1::DemixingSet;
use crate::stft::Spectrogram;

/// Largest allowed ratio between the smallest and largest eigenvalue of R'.
const RANK_DEFICIENCY_TOL: f64 = 1e-8;
/// Below this ratio the second-smallest eigenvalue counts as a second null
/// direction.
const SECOND_NULL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseScmBundle {
    /// R'_i, Hermitian PSD with one (numerically) zero eigenvalue.
    pub r_prime: Vec<CMat>,
    /// Unit null vector u_i of R'_i.
    pub null_vector: Vec<CVec>,
    /// Smallest positive eigenvalue sigma_i of R'_i.
    pub sigma_min_pos: Vec<f64>,
    /// Target steering vector a_i^(t).
    pub steering: Vec<CVec>,
}

impl NoiseScmBundle {
    pub fn n_bins(&self) -> usize {
        self.r_prime.len()
    }

    pub fn n_channels(&self) -> usize {
        self.r_prime.first().map_or(0, CMat::dim)
    }

    /// Builds a bundle from given per-bin R' and steering vectors, taking the
    /// null vector and sigma from the eigendecomposition.
    pub fn from_parts(r_prime: Vec<CMat>, steering: Vec<CVec>) -> Result<Self> {
        if r_prime.len() != steering.len() {
            return Err(Error::invalid(Stage::Scm, "one steering vector per bin is required"));
        }
        let mut bundle = NoiseScmBundle {
            r_prime: Vec::with_capacity(steering.len()),
            null_vector: Vec::with_capacity(steering.len()),
            sigma_min_pos: Vec::with_capacity(steering.len()),
            steering,
        };
        for (i, r) in r_prime.into_iter().enumerate() {
            let r = r.hermitize();
            let (u, sigma) = null_space(&r).map_err(|e| match e {
                Error::Numerical { msg, .. } => Error::numerical(Stage::Scm, format!("bin {i}: {msg}")),
                other => other.at(Stage::Scm),
            })?;
            bundle.r_prime.push(r);
            bundle.null_vector.push(u);
            bundle.sigma_min_pos.push(sigma);
        }
        Ok(bundle)
    }
}

/// Null vector and smallest positive eigenvalue of a rank-(M-1) PSD matrix.
fn null_space(r: &CMat) -> Result<(CVec, f64)> {
    let m = r.dim();
    let eig = eig_hermitian(r)?;
    let largest = eig.values[m - 1];
    if !(largest > 0.0) {
        return Err(Error::numerical(Stage::Scm, "noise SCM has no positive eigenvalue"));
    }
    if eig.values[0] > RANK_DEFICIENCY_TOL * largest {
        return Err(Error::numerical(
            Stage::Scm,
            format!(
                "noise SCM is not rank deficient (eigenvalue ratio {:e})",
                eig.values[0] / largest
            ),
        ));
    }
    let sigma = eig.values[1];
    if sigma < SECOND_NULL_TOL * largest {
        return Err(Error::numerical(
            Stage::Scm,
            format!(
                "noise SCM has more than one null direction (eigenvalue ratio {:e})",
                sigma / largest
            ),
        ));
    }
    Ok((eig.vectors.column(0), sigma))
}

/// R'_i = (1/J) sum_j yhat yhat^H where yhat = A_i (W_i x_ij with entry n_t
/// zeroed).
pub fn noise_scm(x: &Spectrogram, demix: &DemixingSet, target: usize) -> Result<NoiseScmBundle> {
    let (n_bins, n_frames, n_ch) = x.data.dim();
    if n_frames == 0 {
        return Err(Error::invalid(Stage::Scm, "spectrogram has no frames"));
    }
    if target >= n_ch {
        return Err(Error::invalid(Stage::Scm, format!("target channel {target} out of range")));
    }
    if demix.n_bins() != n_bins || demix.n_channels() != n_ch {
        return Err(Error::invalid(Stage::Scm, "demixing set does not match the spectrogram"));
    }
    let mut r_prime = Vec::with_capacity(n_bins);
    let mut steering = Vec::with_capacity(n_bins);
    for i in 0..n_bins {
        let w = &demix.demix[i];
        let a = &demix.mixing[i];
        let mut acc = CMat::zeros(n_ch);
        for j in 0..n_frames {
            let mut y = w.mul_vec(&x.vector(i, j));
            y[target] = C64::new(0.0, 0.0);
            let yhat = a.mul_vec(&y);
            acc.add_outer(1.0, &yhat, &yhat);
        }
        r_prime.push(acc.scale(1.0 / n_frames as f64));
        steering.push(a.column(target));
    }
    NoiseScmBundle::from_parts(r_prime, steering)
}

const DUMP_MAGIC: &[u8; 4] = b"RSCM";
const DUMP_VERSION: u32 = 1;

/// Writes a diagnostic dump of the bundle.
///
/// Layout, all little-endian: magic `RSCM`, u32 version (1), u32 bins,
/// u32 channels, then per bin: R' as M*M row-major complex64 (f32 re, f32 im),
/// u as M complex64, a_target as M complex64, sigma as f32.
pub fn write_dump(bundle: &NoiseScmBundle, out: &mut impl Write) -> io::Result<()> {
    fn c64(out: &mut impl Write, v: C64) -> io::Result<()> {
        out.write_all(&(v.re as f32).to_le_bytes())?;
        out.write_all(&(v.im as f32).to_le_bytes())
    }
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    out.write_all(&(bundle.n_bins() as u32).to_le_bytes())?;
    out.write_all(&(bundle.n_channels() as u32).to_le_bytes())?;
    for i in 0..bundle.n_bins() {
        for &v in bundle.r_prime[i].as_slice() {
            c64(out, v)?;
        }
        for &v in bundle.null_vector[i].iter().chain(bundle.steering[i].iter()) {
            c64(out, v)?;
        }
        out.write_all(&(bundle.sigma_min_pos[i] as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dump written by [`write_dump`] (at f32 precision).
pub fn read_dump(input: &mut impl Read) -> io::Result<NoiseScmBundle> {
    fn f32le(input: &mut impl Read) -> io::Result<f32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
    fn u32le(input: &mut impl Read) -> io::Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn c64(input: &mut impl Read) -> io::Result<C64> {
        Ok(C64::new(f32le(input)? as f64, f32le(input)? as f64))
    }
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC || u32le(input)? != DUMP_VERSION {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "not an SCM dump"));
    }
    let n_bins = u32le(input)? as usize;
    let m = u32le(input)? as usize;
    let mut bundle = NoiseScmBundle {
        r_prime: Vec::with_capacity(n_bins),
        null_vector: Vec::with_capacity(n_bins),
        sigma_min_pos: Vec::with_capacity(n_bins),
        steering: Vec::with_capacity(n_bins),
    };
    for _ in 0..n_bins {
        let mut r = CMat::zeros(m);
        for row in 0..m {
            for col in 0..m {
                r[(row, col)] = c64(input)?;
            }
        }
        bundle.r_prime.push(r);
        bundle.null_vector.push((0..m).map(|_| c64(input)).collect::<io::Result<_>>()?);
        bundle.steering.push((0..m).map(|_| c64(input)).collect::<io::Result<_>>()?);
        bundle.sigma_min_pos.push(f32le(input)? as f64);
    }
    Ok(bundle)
}
