use std::path::Path;

use rubato::{FftFixedInOut, Resampler};

use crate::error::{Error, Result};

/// Reads a WAV file as mono f32 in [-1, 1], averaging channels.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::path(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let mono = interleaved
        .chunks(ch)
        .map(|frame| frame.iter().sum::<f32>() / ch as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::path(parent, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

/// Band-limited resampling; output length is `round(n * to / from)` and the
/// resampler's group delay is removed.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == 0 || to == 0 {
        return Err(Error::Domain("sample rates must be > 0".into()));
    }
    if from == to {
        return Ok(samples.to_vec());
    }
    let target = (samples.len() as f64 * to as f64 / from as f64).round() as usize;
    let mut rs = FftFixedInOut::<f64>::new(from as usize, to as usize, 1024, 1)
        .map_err(|e| Error::Domain(e.to_string()))?;
    let delay = rs.output_delay();
    let input: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let mut out: Vec<f64> = Vec::with_capacity(target + delay);
    let mut pos = 0;
    while out.len() < target + delay {
        let need = rs.input_frames_next();
        let chunk = if pos + need <= input.len() {
            let res = rs.process(&[&input[pos..pos + need]], None);
            pos += need;
            res
        } else {
            let tail = &input[pos.min(input.len())..];
            pos = input.len();
            rs.process_partial(Some(&[tail]), None)
        }
        .map_err(|e| Error::Domain(e.to_string()))?;
        out.extend_from_slice(&chunk[0]);
    }
    Ok(out[delay..delay + target].iter().map(|&v| v as f32).collect())
}
