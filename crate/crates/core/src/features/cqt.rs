//! Direct constant-Q transform with Hann-windowed complex kernels whose
//! length is inversely proportional to the bin frequency.

use std::f64::consts::PI;

pub struct CqtKernel {
    /// Per bin: (real, imaginary) kernel taps centered on the frame.
    bins: Vec<(Vec<f64>, Vec<f64>)>,
}

impl CqtKernel {
    pub fn new(sr: f64, f_min: f64, n_bins: usize, bins_per_octave: usize) -> Self {
        let q = 1.0 / (2f64.powf(1.0 / bins_per_octave as f64) - 1.0);
        let bins = (0..n_bins)
            .map(|k| {
                let fk = f_min * 2f64.powf(k as f64 / bins_per_octave as f64);
                let len = (q * sr / fk).ceil() as usize;
                let mut re = Vec::with_capacity(len);
                let mut im = Vec::with_capacity(len);
                for n in 0..len {
                    let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos();
                    let phase = -2.0 * PI * q * n as f64 / len as f64;
                    re.push(w * phase.cos() / len as f64);
                    im.push(w * phase.sin() / len as f64);
                }
                (re, im)
            })
            .collect();
        Self { bins }
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn kernel_len(&self, bin: usize) -> usize {
        self.bins[bin].0.len()
    }

    /// Power per (frame, bin) at frames centered on `j * hop`, zero padded.
    pub fn transform(&self, samples: &[f64], hop: usize) -> Vec<Vec<f64>> {
        let frames = 1 + samples.len() / hop;
        let n = samples.len() as isize;
        (0..frames)
            .map(|j| {
                let center = (j * hop) as isize;
                self.bins
                    .iter()
                    .map(|(re, im)| {
                        let start = center - (re.len() / 2) as isize;
                        let lo = (-start).max(0) as usize;
                        let hi = ((n - start).max(0) as usize).min(re.len());
                        let (mut sr, mut si) = (0.0, 0.0);
                        for i in lo..hi {
                            let x = samples[(start + i as isize) as usize];
                            sr += x * re[i];
                            si += x * im[i];
                        }
                        sr * sr + si * si
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_lengths_shrink_with_frequency() {
        let k = CqtKernel::new(8000.0, 32.7, 84, 12);
        assert_eq!(k.n_bins(), 84);
        for b in 1..84 {
            assert!(k.kernel_len(b) <= k.kernel_len(b - 1));
        }
        // Q ~ 16.82 at 12 bins per octave
        assert_eq!(k.kernel_len(0), 4115);
    }
}
