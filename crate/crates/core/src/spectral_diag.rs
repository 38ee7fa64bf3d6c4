//! Radial-band spectral energy of the two bands and their overlap.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::latent_teacher::{LatentCache, LatentTensor};
use crate::spectral_proxy::factorize;

/// Energy below this fraction of the reference mean squared amplitude is
/// treated as no signal.
pub const ENERGY_EPS: f64 = 1e-12;
pub const DEFAULT_BANDS: usize = 10;
pub const DEFAULT_GRID: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct RadialSpectrum {
    /// Normalized band energies, or all zeros when degenerate.
    pub energies: Vec<f64>,
    pub grid: (usize, usize),
    /// Channel-mean power, scaled so it equals the mean squared amplitude.
    pub total_energy: f64,
}

impl RadialSpectrum {
    pub fn bands(&self) -> usize {
        self.energies.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.energies.iter().all(|&e| e == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    /// Mean overlap over the samples that were kept.
    pub overlap: f64,
    /// Population standard deviation of the per-sample overlaps.
    pub overlap_std: f64,
    /// Mean over samples of `min(e_base(k), e_detail(k))`.
    pub band_min: Vec<f64>,
    pub e_base: Vec<f64>,
    pub e_detail: Vec<f64>,
    pub per_sample: Vec<f64>,
    pub skipped: usize,
}

/// Weights of an area-average resampling from `n` to `m` cells along one
/// axis. Computed on an integer grid, so the identity case is exact.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    // On an axis of length n·m, output cell i spans [i·n, (i+1)·n) and
    // input cell p spans [p·m, (p+1)·m).
    (0..m)
        .map(|i| {
            let (lo, hi) = (i * n, (i + 1) * n);
            (0..n)
                .filter_map(|p| {
                    let (a, b) = (p * m, (p + 1) * m);
                    let ov = hi.min(b).saturating_sub(lo.max(a));
                    (ov > 0).then(|| (p, ov as f64 / n as f64))
                })
                .collect()
        })
        .collect()
}

/// Per-channel area-average resampling to `h_a × w_a`.
pub fn align_grid(z: &LatentTensor, h_a: usize, w_a: usize) -> Result<LatentTensor> {
    if h_a < 2 || w_a < 2 {
        return Err(Error::Parameter(format!(
            "analysis grid must be at least 2x2, got {h_a}x{w_a}"
        )));
    }
    let (c, h, w) = z.shape();
    if (h, w) == (h_a, w_a) {
        return Ok(z.clone());
    }
    let wy = area_weights(h, h_a);
    let wx = area_weights(w, w_a);
    let mut out = Vec::with_capacity(c * h_a * w_a);
    let mut rows = vec![0.0; h_a * w];
    for ch in 0..c {
        let src = z.channel(ch);
        for (i, weights) in wy.iter().enumerate() {
            for j in 0..w {
                rows[i * w + j] = weights.iter().map(|&(p, wt)| wt * src[p * w + j]).sum();
            }
        }
        for i in 0..h_a {
            for weights in &wx {
                out.push(weights.iter().map(|&(q, wt)| wt * rows[i * w + q]).sum());
            }
        }
    }
    LatentTensor::new(z.sample_id.clone(), c, h_a, w_a, out)
}

fn centered(u: usize, n: usize) -> f64 {
    if u <= n / 2 {
        u as f64
    } else {
        u as f64 - n as f64
    }
}

/// Normalized radius of frequency `(u, v)`: 1 at the Nyquist corner.
pub fn normalized_radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fy = centered(u, h) / h as f64;
    let fx = centered(v, w) / w as f64;
    (fy * fy + fx * fx).sqrt() / 0.5f64.sqrt()
}

/// Band of a radius: 0 for DC, else the `k` with `(k−1)/K < r ≤ k/K`,
/// returned zero-based and clamped to the last band.
pub fn band_of(r: f64, bands: usize) -> usize {
    if r <= 0.0 {
        return 0;
    }
    let k = bands as f64;
    let mut b = ((r * k).ceil() as usize).clamp(1, bands);
    while b > 1 && r <= (b - 1) as f64 / k {
        b -= 1;
    }
    while b < bands && r > b as f64 / k {
        b += 1;
    }
    b - 1
}

/// Channel-mean power spectrum `|F(u,v)|² / (h·w)²`, row-major.
pub fn power_spectrum(z: &LatentTensor) -> Vec<f64> {
    let (c, h, w) = z.shape();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let norm = ((h * w) as f64).powi(2);
    let mut power = vec![0.0; h * w];
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for ch in 0..c {
        for (b, x) in buf.iter_mut().zip(z.channel(ch)) {
            *b = Complex::new(*x, 0.0);
        }
        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            col_fft.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
        for (p, f) in power.iter_mut().zip(&buf) {
            *p += f.norm_sqr() / norm;
        }
    }
    for p in power.iter_mut() {
        *p /= c as f64;
    }
    power
}

fn mean_square(z: &LatentTensor) -> f64 {
    z.data().iter().map(|x| x * x).sum::<f64>() / z.data().len() as f64
}

/// Radial spectrum, with degeneracy judged against `z` itself.
pub fn radial_spectrum(z: &LatentTensor, bands: usize) -> Result<RadialSpectrum> {
    radial_spectrum_against(z, bands, mean_square(z))
}

/// Radial spectrum, degenerate when the energy is below
/// `ENERGY_EPS · reference_power`.
pub fn radial_spectrum_against(
    z: &LatentTensor,
    bands: usize,
    reference_power: f64,
) -> Result<RadialSpectrum> {
    if bands == 0 {
        return Err(Error::Parameter("need at least one radial band".into()));
    }
    let (_, h, w) = z.shape();
    let power = power_spectrum(z);
    let mut energies = vec![0.0; bands];
    for u in 0..h {
        for v in 0..w {
            energies[band_of(normalized_radius(u, v, h, w), bands)] += power[u * w + v];
        }
    }
    let total: f64 = energies.iter().sum();
    if total > ENERGY_EPS * reference_power && total > 0.0 {
        for e in energies.iter_mut() {
            *e /= total;
        }
    } else {
        energies.iter_mut().for_each(|e| *e = 0.0);
    }
    Ok(RadialSpectrum {
        energies,
        grid: (h, w),
        total_energy: total,
    })
}

/// `Σ_k min(a_k, b_k)` as a single-sample report.
pub fn overlap(a: &RadialSpectrum, b: &RadialSpectrum) -> Result<OverlapReport> {
    if a.bands() != b.bands() {
        return Err(Error::Parameter(format!(
            "band count mismatch: {} vs {}",
            a.bands(),
            b.bands()
        )));
    }
    let band_min: Vec<f64> = a.energies.iter().zip(&b.energies).map(|(x, y)| x.min(*y)).collect();
    let value = band_min.iter().sum::<f64>().clamp(0.0, 1.0);
    Ok(OverlapReport {
        overlap: value,
        overlap_std: 0.0,
        band_min,
        e_base: a.energies.clone(),
        e_detail: b.energies.clone(),
        per_sample: vec![value],
        skipped: 0,
    })
}

/// Factorizes every sample, aligns both bands to `grid`, and aggregates the
/// band overlap. Samples where either band carries no energy are skipped.
pub fn diagnose(
    cache: &LatentCache,
    kernel: usize,
    bands: usize,
    grid: (usize, usize),
) -> Result<OverlapReport> {
    if cache.is_empty() {
        return Err(Error::Parameter("diagnostic needs a nonempty cache".into()));
    }
    let mut kept: Vec<OverlapReport> = Vec::new();
    let mut skipped = 0;
    for r in &cache.records {
        let pair = factorize(&r.latent, kernel)?;
        let reference = mean_square(&align_grid(&r.latent, grid.0, grid.1)?);
        let base = radial_spectrum_against(&align_grid(&pair.base, grid.0, grid.1)?, bands, reference)?;
        let detail =
            radial_spectrum_against(&align_grid(&pair.detail, grid.0, grid.1)?, bands, reference)?;
        if base.is_degenerate() || detail.is_degenerate() {
            skipped += 1;
            continue;
        }
        kept.push(overlap(&base, &detail)?);
    }
    if kept.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {skipped} samples have a band without energy"
        )));
    }
    let n = kept.len() as f64;
    let mean_vec = |f: &dyn Fn(&OverlapReport) -> &Vec<f64>| -> Vec<f64> {
        (0..bands)
            .map(|k| kept.iter().map(|r| f(r)[k]).sum::<f64>() / n)
            .collect()
    };
    let per_sample: Vec<f64> = kept.iter().map(|r| r.overlap).collect();
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = per_sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(OverlapReport {
        overlap: mean,
        overlap_std: var.sqrt(),
        band_min: mean_vec(&|r| &r.band_min),
        e_base: mean_vec(&|r| &r.e_base),
        e_detail: mean_vec(&|r| &r.e_detail),
        per_sample,
        skipped,
    })
}

/// Tab-delimited band table followed by the summary footer.
pub fn format_report(report: &OverlapReport) -> String {
    let mut out = String::from("band_index\te_base\te_detail\tmin\n");
    for k in 0..report.band_min.len() {
        let _ = writeln!(
            out,
            "{}\t{:.12}\t{:.12}\t{:.12}",
            k + 1,
            report.e_base[k],
            report.e_detail[k],
            report.band_min[k]
        );
    }
    let _ = writeln!(out, "overlap_mean\t{:.12}", report.overlap);
    let _ = writeln!(out, "overlap_std\t{:.12}", report.overlap_std);
    let _ = writeln!(out, "skipped_count\t{}", report.skipped);
    out
}
