//! FFT-domain filter banks: HTK mel triangles and 4th-order gammatone
//! magnitude responses on ERB-spaced centers.

use super::{hz_of_mel, mel_of_hz};

fn bin_freqs(n_fft: usize, sr: f64) -> Vec<f64> {
    (0..=n_fft / 2).map(|k| k as f64 * sr / n_fft as f64).collect()
}

fn mel_points(f_min: f64, f_max: f64, n_bands: usize) -> Vec<f64> {
    let (lo, hi) = (
        mel_of_hz(f_min).unwrap_or(0.0),
        mel_of_hz(f_max).unwrap_or(0.0),
    );
    (0..n_bands + 2)
        .map(|i| hz_of_mel(lo + (hi - lo) * i as f64 / (n_bands + 1) as f64))
        .collect()
}

#[cfg(test)]
pub(crate) fn mel_centers(f_min: f64, f_max: f64, n_bands: usize) -> Vec<f64> {
    mel_points(f_min, f_max, n_bands)[1..=n_bands].to_vec()
}

/// Triangular filters with unit peak, `n_bands x (n_fft / 2 + 1)`.
pub fn mel_filterbank(n_fft: usize, sr: f64, f_min: f64, f_max: f64, n_bands: usize) -> Vec<Vec<f64>> {
    let freqs = bin_freqs(n_fft, sr);
    let pts = mel_points(f_min, f_max, n_bands);
    (0..n_bands)
        .map(|b| {
            let (l, c, r) = (pts[b], pts[b + 1], pts[b + 2]);
            freqs
                .iter()
                .map(|&f| {
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Equivalent rectangular bandwidth (Glasberg & Moore), Hz.
pub fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

fn erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn hz_of_erb_rate(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

pub(crate) fn erb_centers(f_min: f64, f_max: f64, n_bands: usize) -> Vec<f64> {
    let (lo, hi) = (erb_rate(f_min), erb_rate(f_max));
    if n_bands == 1 {
        return vec![hz_of_erb_rate(0.5 * (lo + hi))];
    }
    (0..n_bands)
        .map(|i| hz_of_erb_rate(lo + (hi - lo) * i as f64 / (n_bands - 1) as f64))
        .collect()
}

/// Squared magnitude response of a 4th-order gammatone filter,
/// `|G(f)|^2 = (1 + ((f - fc) / b)^2)^-4` with `b = 1.019 ERB(fc)`.
pub fn gammatone_filterbank(
    n_fft: usize,
    sr: f64,
    f_min: f64,
    f_max: f64,
    n_bands: usize,
) -> Vec<Vec<f64>> {
    const ORDER: i32 = 4;
    let freqs = bin_freqs(n_fft, sr);
    erb_centers(f_min, f_max, n_bands)
        .into_iter()
        .map(|fc| {
            let b = 1.019 * erb_bandwidth(fc);
            freqs
                .iter()
                .map(|&f| (1.0 + ((f - fc) / b).powi(2)).powi(-ORDER))
                .collect()
        })
        .collect()
}
