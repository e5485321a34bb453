//! RIFF PCM wav files: mono, 16-bit little-endian, normalized by 1/32768.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DspError, Result, Waveform};

/// f64 [-1, 1] -> i16 with saturation; round half away from zero.
pub fn to_pcm16(samples: &[f64]) -> Vec<i16> {
    samples
        .iter()
        .map(|&x| (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}

/// i16 -> f64, scaled by 1/32768.
pub fn from_pcm16(samples: &[i16]) -> Vec<f64> {
    samples.iter().map(|&s| s as f64 / 32768.0).collect()
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    write_wav_pcm16(path, &to_pcm16(w.samples()), w.sample_rate())
}

/// Writes already-quantized samples; used when integer-domain arithmetic
/// must survive the file round trip exactly.
pub fn write_wav_pcm16(path: &Path, samples: &[i16], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let riff_len = 4 + (8 + 16) + (8 + data_len);
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_len.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes)
}

/// Reads a wav file and rejects any sample rate other than `expected`;
/// there is no resampling.
pub fn read_wav_expecting(path: &Path, expected: u32) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate() != expected {
        return Err(DspError::UnsupportedRate { expected, got: w.sample_rate() });
    }
    Ok(w)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let bad = |m: &str| DspError::BadWav(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(bad("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too small"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if format != 1 {
        return Err(bad("only PCM supported"));
    }
    if channels != 1 {
        return Err(bad("only mono supported"));
    }
    if bits != 16 {
        return Err(bad("only 16-bit samples supported"));
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(bad("odd data length"));
    }
    let pcm: Vec<i16> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Waveform::new(from_pcm16(&pcm), rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wav_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pcm: Vec<i16> = (0..5000).map(|_| rng.gen::<i16>()).collect();
        let w = Waveform::new(from_pcm16(&pcm), 8000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        assert_eq!(back.samples(), w.samples());
    }

    #[test]
    fn rate_check_rejects_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform::new(vec![0.25; 100], 16000).unwrap();
        write_wav(&path, &w).unwrap();
        assert!(matches!(
            read_wav_expecting(&path, 8000),
            Err(DspError::UnsupportedRate { expected: 8000, got: 16000 })
        ));
        assert!(read_wav_expecting(&path, 16000).is_ok());
    }

    #[test]
    fn clipping_saturates() {
        let pcm = to_pcm16(&[2.0, -2.0, 0.5]);
        assert_eq!(pcm, vec![32767, -32768, 16384]);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(parse_wav(b"not a wav"), Err(DspError::BadWav(_))));
    }
}
