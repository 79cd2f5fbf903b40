use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex;

/// Periodic Hann window of `win_len`, zero-padded and centered in `n_fft`.
pub(crate) fn padded_hann(n_fft: usize, win_len: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let off = (n_fft - win_len) / 2;
    for i in 0..win_len {
        w[off + i] =
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win_len as f64).cos();
    }
    w
}

/// Centered STFT with zero padding of `n_fft / 2` on both sides, giving
/// `1 + len / hop` frames of `n_fft / 2 + 1` bins.
pub fn stft(samples: &[f64], n_fft: usize, win_len: usize, hop: usize) -> Vec<Vec<Complex<f64>>> {
    let pad = n_fft / 2;
    let frames = 1 + samples.len() / hop;
    let window = padded_hann(n_fft, win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for j in 0..frames {
        let origin = (j * hop) as isize - pad as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = origin + i as isize;
            let x = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
            *b = Complex::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_fft / 2 + 1].to_vec());
    }
    out
}

/// Weighted overlap-add inverse of [`stft`], trimmed to `len` samples.
pub fn istft(
    frames: &[Vec<Complex<f64>>],
    n_fft: usize,
    win_len: usize,
    hop: usize,
    len: usize,
) -> Vec<f64> {
    let pad = n_fft / 2;
    let window = padded_hann(n_fft, win_len);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let total = pad * 2 + hop * frames.len() + n_fft;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (j, half) in frames.iter().enumerate() {
        for k in 0..n_fft {
            buf[k] = if k <= n_fft / 2 {
                half[k]
            } else {
                half[n_fft - k].conj()
            };
        }
        ifft.process(&mut buf);
        let origin = j * hop;
        for i in 0..n_fft {
            acc[origin + i] += buf[i].re / n_fft as f64 * window[i];
            norm[origin + i] += window[i] * window[i];
        }
    }
    (0..len)
        .map(|i| {
            let n = norm[i + pad];
            if n > 1e-8 {
                acc[i + pad] / n
            } else {
                0.0
            }
        })
        .collect()
}
