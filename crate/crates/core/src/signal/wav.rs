//! RIFF/WAVE reading (PCM-16, float-32; mono or stereo) and PCM-16 writing.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcmSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl PcmSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn wav_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Wav {
        offset,
        msg: msg.into(),
    }
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

#[derive(Clone, Copy, PartialEq)]
enum Codec {
    Pcm16,
    Float32,
}

/// Decodes a RIFF/WAVE byte buffer. Stereo is averaged to mono; 16-bit
/// integers are divided by 32768.
pub fn load_wav(bytes: &[u8]) -> Result<PcmSignal> {
    if bytes.len() < 12 {
        return Err(wav_err(bytes.len(), "malformed header: shorter than RIFF preamble"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(wav_err(0, "malformed header: missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(wav_err(8, "malformed header: missing WAVE tag"));
    }
    let mut pos = 12;
    let mut format: Option<(Codec, usize, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(wav_err(pos, "malformed header: short fmt chunk"));
                }
                let tag = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2) as usize;
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                // WAVE_FORMAT_EXTENSIBLE carries the real tag in its sub-format GUID
                let tag = if tag == 0xFFFE && size >= 40 && body + 26 <= bytes.len() {
                    u16_at(bytes, body + 24)
                } else {
                    tag
                };
                let codec = match (tag, bits) {
                    (1, 16) => Codec::Pcm16,
                    (3, 32) => Codec::Float32,
                    _ => {
                        return Err(wav_err(
                            body,
                            format!("unsupported codec: format tag {tag}, {bits} bits"),
                        ))
                    }
                };
                if !(1..=2).contains(&channels) {
                    return Err(wav_err(body + 2, format!("unsupported codec: {channels} channels")));
                }
                if rate == 0 {
                    return Err(wav_err(body + 4, "malformed header: zero sample rate"));
                }
                format = Some((codec, channels, rate));
            }
            b"data" => {
                let (codec, channels, rate) =
                    format.ok_or_else(|| wav_err(pos, "malformed header: data before fmt"))?;
                if body + size > bytes.len() {
                    return Err(wav_err(
                        body,
                        format!(
                            "truncated data chunk: declares {size} bytes, {} present",
                            bytes.len() - body
                        ),
                    ));
                }
                let width = match codec {
                    Codec::Pcm16 => 2,
                    Codec::Float32 => 4,
                };
                let frame = width * channels;
                if !size.is_multiple_of(frame) {
                    return Err(wav_err(body, "truncated data chunk: partial sample frame"));
                }
                let data = &bytes[body..body + size];
                let mut samples = Vec::with_capacity(size / frame);
                for f in data.chunks_exact(frame) {
                    let mut acc = 0.0f32;
                    for c in 0..channels {
                        let s = &f[c * width..(c + 1) * width];
                        acc += match codec {
                            Codec::Pcm16 => i16::from_le_bytes([s[0], s[1]]) as f32 / 32768.0,
                            Codec::Float32 => f32::from_le_bytes([s[0], s[1], s[2], s[3]]),
                        };
                    }
                    samples.push(acc / channels as f32);
                }
                return PcmSignal::new(samples, rate)
                    .map_err(|e| wav_err(body, format!("invalid samples: {e}")));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(wav_err(pos.min(bytes.len()), "malformed header: no data chunk"))
}

/// Encodes mono PCM-16. Samples are clamped to `[-1, 1]`.
pub fn encode_wav_pcm16(signal: &PcmSignal) -> Vec<u8> {
    let n = signal.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &signal.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<PcmSignal> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_wav(&bytes)
}

pub fn write_wav(path: &Path, signal: &PcmSignal) -> Result<()> {
    std::fs::write(path, encode_wav_pcm16(signal)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Hand-assembles a WAV container around raw sample bytes.
    pub(crate) fn container(tag: u16, channels: u16, bits: u16, rate: u32, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        let align = channels * bits / 8;
        out.extend_from_slice(&(rate * align as u32).to_le_bytes());
        out.extend_from_slice(&align.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn pcm16_scaling() {
        let raw: Vec<u8> = [0i16, 16384, -16384, 32767]
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .collect();
        let sig = load_wav(&container(1, 1, 16, 44100, &raw)).unwrap();
        assert_eq!(sig.samples, vec![0.0, 0.5, -0.5, 32767.0 / 32768.0]);
        assert_eq!(sig.sample_rate, 44100);
    }

    #[test]
    fn stereo_float_is_averaged() {
        let raw: Vec<u8> = [0.2f32, 0.4].iter().flat_map(|s| s.to_le_bytes()).collect();
        let sig = load_wav(&container(3, 2, 32, 16000, &raw)).unwrap();
        assert_eq!(sig.samples.len(), 1);
        assert!((sig.samples[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn rifx_is_malformed() {
        let mut bytes = container(1, 1, 16, 8000, &[0, 0]);
        bytes[3] = b'X';
        match load_wav(&bytes) {
            Err(Error::Wav { offset: 0, msg }) => assert!(msg.contains("malformed header")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsupported_codec_is_positioned() {
        let bytes = container(1, 1, 24, 8000, &[0, 0, 0]);
        match load_wav(&bytes) {
            Err(Error::Wav { offset: 20, msg }) => assert!(msg.contains("unsupported codec")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_data_chunk() {
        let mut bytes = container(1, 1, 16, 8000, &[0, 0, 1, 0]);
        bytes.truncate(bytes.len() - 2);
        match load_wav(&bytes) {
            Err(Error::Wav { offset: 44, msg }) => assert!(msg.contains("truncated data chunk")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_then_load() {
        let sig = PcmSignal::new(vec![0.0, 0.25, -0.5, 1.0], 16000).unwrap();
        let back = load_wav(&encode_wav_pcm16(&sig)).unwrap();
        for (a, b) in sig.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32768.0 + 1e-6);
        }
    }
}
