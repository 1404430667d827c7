//! PCM WAV reading and writing (16-bit signed, little-endian).

use std::path::Path;

use crate::error::{Error, Result};

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav { path: path.display().to_string(), message: e.to_string() }
}

/// Read a 16-bit integer PCM file and de-interleave into channels.
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<i16>>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(path, "expected 16-bit integer PCM"));
    }
    let channels = spec.channels as usize;
    let mut out: Vec<Vec<i16>> = vec![Vec::new(); channels];
    for (i, sample) in reader.samples::<i16>().enumerate() {
        let s = sample.map_err(|e| wav_err(path, e))?;
        out[i % channels].push(s);
    }
    if out.iter().any(|c| c.len() != out[0].len()) {
        return Err(wav_err(path, "truncated final sample frame"));
    }
    Ok((out, spec.sample_rate))
}

/// Write channels as one interleaved 16-bit PCM file.
pub fn write_wav(path: &Path, channels: &[Vec<i16>], sample_rate: u32) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::Config("no channels to write".into()));
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for i in 0..len {
        for c in channels {
            writer.write_sample(c[i]).map_err(|e| wav_err(path, e))?;
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_multichannel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let chans = vec![vec![0i16, 100, -100, 32767], vec![1, 2, 3, -32768]];
        write_wav(&path, &chans, 16000).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(back, chans);
    }
}
