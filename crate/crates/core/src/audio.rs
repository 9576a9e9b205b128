//! Multi-channel WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// De-interleaved audio: one vector per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f32>>,
}

impl Audio {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Writes 32-bit float PCM.
pub fn write_wav(path: &Path, audio: &Audio) -> Result<()> {
    let n_ch = audio.channels.len();
    if n_ch == 0 || audio.channels.iter().any(|c| c.len() != audio.len()) {
        return Err(Error::InvalidArgument("channels must be non-empty and equally long".into()));
    }
    let spec = WavSpec {
        channels: n_ch as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec)?;
    for i in 0..audio.len() {
        for ch in &audio.channels {
            w.write_sample(ch[i])?;
        }
    }
    w.finalize()?;
    Ok(())
}

/// Reads float or integer PCM, scaling integers to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|s| s as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch.max(1)); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &s) in frame.iter().enumerate() {
            channels[c].push(s);
        }
    }
    Ok(Audio { sample_rate: spec.sample_rate, channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let a = Audio {
            sample_rate: 16_000,
            channels: vec![vec![0.0, 0.5, -0.25], vec![1.0, -1.0, 0.125]],
        };
        write_wav(&p, &a).unwrap();
        assert_eq!(read_wav(&p).unwrap(), a);
    }

    #[test]
    fn ragged_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Audio { sample_rate: 8000, channels: vec![vec![0.0], vec![]] };
        assert!(write_wav(&dir.path().join("b.wav"), &a).is_err());
    }
}
