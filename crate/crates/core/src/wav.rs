//! PCM 16-bit little-endian mono WAV files.
//!
//! Samples map to `i16 / 32768`, so any waveform whose samples are exact
//! multiples of `1/32768` in `[-1, 32767/32768]` survives write-then-read
//! unchanged.

use std::fs;
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const PCM: u16 = 1;

fn wav_err(path: &Path, field: &'static str, message: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        field,
        message: message.into(),
    }
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn decode_wav(bytes: &[u8], path: &Path) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(wav_err(path, "riff_id", "missing RIFF header"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(wav_err(path, "wave_id", "not a WAVE file"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| wav_err(path, "chunk_size", format!("chunk {:?} overruns file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err(path, "fmt_size", format!("fmt chunk too small ({size} bytes)")));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (audio_format, channels, rate, bits) =
                    format.ok_or_else(|| wav_err(path, "fmt", "data chunk before fmt chunk"))?;
                if audio_format != PCM {
                    return Err(wav_err(path, "audio_format", format!("{audio_format}, only PCM (1) is supported")));
                }
                if channels != 1 {
                    return Err(wav_err(path, "num_channels", format!("{channels}, only mono is supported")));
                }
                if bits != 16 {
                    return Err(wav_err(path, "bits_per_sample", format!("{bits}, only 16 is supported")));
                }
                if rate == 0 {
                    return Err(wav_err(path, "sample_rate", "0"));
                }
                if size % 2 != 0 {
                    return Err(wav_err(path, "data_size", format!("{size} is not a whole number of samples")));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(wav_err(path, "data", "no data chunk"))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_wav(&bytes, path)
}

pub fn encode_wav(wave: &Waveform) -> Vec<u8> {
    let data_len = (wave.len() * 2) as u32;
    let rate = wave.sample_rate();
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in wave.samples() {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    fs::write(path, encode_wav(wave))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized(n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| ((i as i64 * 7919 % 65536) - 32768) as f64 / 32768.0)
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn write_read_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = quantized(5000);
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back, w);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(encode_wav(&back), bytes);
    }

    #[test]
    fn stereo_rejected_naming_field() {
        let mut bytes = encode_wav(&quantized(10));
        bytes[22] = 2;
        let err = decode_wav(&bytes, Path::new("x.wav")).unwrap_err();
        assert!(err.to_string().contains("num_channels"), "{err}");
    }

    #[test]
    fn float_and_24bit_rejected() {
        let mut bytes = encode_wav(&quantized(10));
        bytes[20] = 3;
        assert!(decode_wav(&bytes, Path::new("x.wav")).unwrap_err().to_string().contains("audio_format"));
        let mut bytes = encode_wav(&quantized(10));
        bytes[34] = 24;
        assert!(decode_wav(&bytes, Path::new("x.wav")).unwrap_err().to_string().contains("bits_per_sample"));
    }

    #[test]
    fn garbage_rejected() {
        assert!(decode_wav(b"hello world, not a wav", Path::new("x")).is_err());
        let bytes = encode_wav(&quantized(10));
        assert!(decode_wav(&bytes[..30], Path::new("x")).is_err());
    }
}
