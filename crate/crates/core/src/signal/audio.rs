use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SAMPLE_RATE;
use crate::error::{bail, Error, Result};

/// Equal-length channels of samples at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f64>>,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            bail!(Size, "audio buffer needs at least one channel");
        }
        let len = channels[0].len();
        if let Some(bad) = channels.iter().position(|c| c.len() != len) {
            bail!(
                Shape,
                "channel {bad} has {} samples, channel 0 has {len}",
                channels[bad].len()
            );
        }
        Ok(Self { channels })
    }

    pub fn mono(samples: Vec<f64>) -> Self {
        Self {
            channels: vec![samples],
        }
    }

    pub fn rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a PCM16 or float32 WAV file, resampling to 24 kHz when needed.
pub fn wav_read(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let n_channels = spec.channels as usize;
    if n_channels == 0 {
        bail!(Format, "{}: zero channels", path.display());
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (format, bits) => bail!(
            Unsupported,
            "{}: {bits}-bit {format:?} samples (only 16-bit PCM and 32-bit float)",
            path.display()
        ),
    };
    if interleaved.len() % n_channels != 0 {
        bail!(Format, "{}: data chunk ends mid-frame", path.display());
    }
    let frames = interleaved.len() / n_channels;
    let mut channels = vec![Vec::with_capacity(frames); n_channels];
    for frame in interleaved.chunks_exact(n_channels) {
        for (ch, &v) in channels.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    if spec.sample_rate != SAMPLE_RATE {
        channels = channels
            .iter()
            .map(|c| resample(c, spec.sample_rate, SAMPLE_RATE))
            .collect();
    }
    AudioBuffer::new(channels)
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e)
            if matches!(e.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) =>
        {
            Error::Format(format!("{}: truncated data", path.display()))
        }
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => Error::Unsupported(format!("{}: wav encoding", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub fn wav_write(buffer: &AudioBuffer, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: buffer.num_channels() as u16,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer =
        hound::WavWriter::new(std::io::BufWriter::new(file), spec).map_err(|e| map_hound(path, e))?;
    for n in 0..buffer.len() {
        for ch in buffer.channels() {
            let v = ch[n];
            let res = match encoding {
                WavEncoding::Pcm16 => {
                    writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                }
                WavEncoding::Float32 => writer.write_sample(v as f32),
            };
            res.map_err(|e| map_hound(path, e))?;
        }
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

const RESAMPLE_HALF_TAPS: i64 = 32;
const KAISER_BETA: f64 = 8.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn kaiser(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited rate conversion with a 64-tap Kaiser-windowed sinc (beta 8).
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0);
    let out_len = (x.len() as f64 * ratio).round() as usize;
    (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let center = t.floor() as i64;
            let mut acc = 0.0;
            for k in (center - RESAMPLE_HALF_TAPS + 1)..=(center + RESAMPLE_HALF_TAPS) {
                if k < 0 || k as usize >= x.len() {
                    continue;
                }
                let d = t - k as f64;
                acc += x[k as usize]
                    * cutoff
                    * sinc(cutoff * d)
                    * kaiser(d / RESAMPLE_HALF_TAPS as f64);
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw_pcm16(path: &Path, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_full_scale_maps_below_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw_pcm16(&p, SAMPLE_RATE, &[32767, -32768, 0]);
        let b = wav_read(&p).unwrap();
        assert_eq!(b.channel(0)[0], 32767.0 / 32768.0);
        assert_eq!(b.channel(0)[1], -1.0);
    }

    #[test]
    fn foreign_rate_is_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let n = 4801;
        let samples: Vec<i16> = (0..n)
            .map(|i| ((i as f64 * 2.0 * PI * 440.0 / 48000.0).sin() * 10000.0) as i16)
            .collect();
        write_raw_pcm16(&p, 48_000, &samples);
        let b = wav_read(&p).unwrap();
        assert_eq!(b.len(), (n as f64 / 2.0).round() as usize);
        // 440 Hz survives decimation with its amplitude intact.
        let mid = &b.channel(0)[200..2200];
        let peak = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 10000.0 / 32768.0).abs() < 5e-3, "peak {peak}");
    }

    #[test]
    fn truncated_data_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw_pcm16(&p, SAMPLE_RATE, &[1; 1000]);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 501]).unwrap();
        let r = wav_read(&p);
        assert!(matches!(r, Err(Error::Format(_))), "{r:?}");
    }

    #[test]
    fn garbage_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        std::fs::write(&p, b"RIFX not really a wave file").unwrap();
        assert!(matches!(wav_read(&p), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(wav_read(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let ch: Vec<f64> = (0..500).map(|i| ((i as f32 * 0.37).sin() * 0.8) as f64).collect();
        let b = AudioBuffer::new(vec![ch.clone(), ch.iter().map(|v| -v).collect()]).unwrap();
        wav_write(&b, &p, WavEncoding::Float32).unwrap();
        assert_eq!(wav_read(&p).unwrap(), b);
    }

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let ch: Vec<f64> = vec![0.5, -0.25, 0.123456, -0.999, 0.0];
        let b = AudioBuffer::mono(ch.clone());
        wav_write(&b, &p, WavEncoding::Pcm16).unwrap();
        let back = wav_read(&p).unwrap();
        for (a, b) in ch.iter().zip(back.channel(0)) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        assert_eq!(back.channel(0)[0], 0.5);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let b = AudioBuffer::mono(vec![0.0; 4]);
        let err = wav_write(&b, "/nonexistent-dir/x/y.wav", WavEncoding::Float32).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn ragged_channels_rejected() {
        assert!(AudioBuffer::new(vec![vec![0.0; 3], vec![0.0; 4]]).is_err());
    }
}
