use std::io::{Cursor, Read};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioBuffer, AudioError};

fn map_err(e: hound::Error) -> AudioError {
    match e {
        // hound reports short reads inside the data chunk as a generic io error
        hound::Error::IoError(io)
            if matches!(io.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) =>
        {
            AudioError::MalformedWav(format!("truncated: {io}"))
        }
        hound::Error::IoError(io) => AudioError::Io(io),
        hound::Error::FormatError(msg) => AudioError::MalformedWav(msg.into()),
        hound::Error::UnfinishedSample => AudioError::MalformedWav("data chunk ends mid-sample".into()),
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("compressed or unknown format tag".into()),
        hound::Error::TooWide => AudioError::UnsupportedEncoding("sample width too large".into()),
        hound::Error::InvalidSampleFormat => AudioError::MalformedWav("inconsistent sample format".into()),
    }
}

/// Decodes a RIFF/WAVE file to mono. Stereo is averaged; integer PCM is
/// divided by `2^(bits - 1)`.
pub fn decode_wav(path: &Path) -> Result<AudioBuffer, AudioError> {
    let bytes = std::fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav_bytes(&bytes, id)
}

pub fn decode_wav_bytes(bytes: &[u8], source_id: impl Into<String>) -> Result<AudioBuffer, AudioError> {
    let mut reader = WavReader::new(Cursor::new(bytes)).map_err(map_err)?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(AudioError::UnsupportedEncoding(format!("{} channels", spec.channels)));
    }
    let interleaved = read_samples(&mut reader, spec)?;
    let channels = spec.channels as usize;
    if interleaved.len() % channels != 0 {
        return Err(AudioError::MalformedWav("incomplete frame".into()));
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|f| (f.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    if mono.is_empty() {
        return Err(AudioError::MalformedWav("no samples".into()));
    }
    AudioBuffer::new(mono, spec.sample_rate, source_id)
}

fn read_samples<R: Read>(reader: &mut WavReader<R>, spec: WavSpec) -> Result<Vec<f32>, AudioError> {
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map_err(map_err)).collect(),
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32).map_err(map_err))
                .collect()
        }
        (fmt, bits) => Err(AudioError::UnsupportedEncoding(format!("{fmt:?} with {bits} bits"))),
    }
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: &Path, buffer: &AudioBuffer) -> Result<(), AudioError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).map_err(map_err)?;
    for &s in buffer.samples() {
        w.write_sample(s).map_err(map_err)?;
    }
    w.finalize().map_err(map_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(spec: WavSpec, write: impl FnOnce(&mut WavWriter<&mut Cursor<Vec<u8>>>)) -> Vec<u8> {
        let mut cursor = Cursor::new(Vec::new());
        {
            let mut w = WavWriter::new(&mut cursor, spec).unwrap();
            write(&mut w);
            w.finalize().unwrap();
        }
        cursor.into_inner()
    }

    fn int_spec(channels: u16, bits: u16) -> WavSpec {
        WavSpec {
            channels,
            sample_rate: 22050,
            bits_per_sample: bits,
            sample_format: SampleFormat::Int,
        }
    }

    #[test]
    fn sixteen_bit_full_scale() {
        let bytes = encode(int_spec(1, 16), |w| w.write_sample(32767i16).unwrap());
        let b = decode_wav_bytes(&bytes, "x").unwrap();
        assert_eq!(b.sample_rate(), 22050);
        assert_eq!(b.samples(), &[(32767.0f64 / 32768.0) as f32]);
    }

    #[test]
    fn twenty_four_bit_scaling() {
        let bytes = encode(int_spec(1, 24), |w| {
            w.write_sample(-8_388_608i32).unwrap();
            w.write_sample(4_194_304i32).unwrap();
        });
        assert_eq!(decode_wav_bytes(&bytes, "x").unwrap().samples(), &[-1.0, 0.5]);
    }

    #[test]
    fn stereo_is_averaged() {
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let bytes = encode(spec, |w| {
            w.write_sample(1.0f32).unwrap();
            w.write_sample(-1.0f32).unwrap();
        });
        assert_eq!(decode_wav_bytes(&bytes, "x").unwrap().samples(), &[0.0]);
    }

    #[test]
    fn truncated_data_chunk_is_malformed() {
        let bytes = encode(int_spec(1, 16), |w| {
            for i in 0..100 {
                w.write_sample(i as i16).unwrap();
            }
        });
        let cut = &bytes[..bytes.len() - 51];
        let r = decode_wav_bytes(cut, "x");
        assert!(matches!(r, Err(AudioError::MalformedWav(_))), "{r:?}");
        assert!(matches!(decode_wav_bytes(&bytes[..20], "x"), Err(AudioError::MalformedWav(_))));
    }

    #[test]
    fn compressed_format_is_unsupported() {
        let mut bytes = encode(int_spec(1, 16), |w| w.write_sample(0i16).unwrap());
        // format tag lives right after "fmt " and its size field
        let pos = bytes.windows(4).position(|w| w == b"fmt ").unwrap() + 8;
        bytes[pos..pos + 2].copy_from_slice(&0x0055u16.to_le_bytes());
        assert!(matches!(decode_wav_bytes(&bytes, "x"), Err(AudioError::UnsupportedEncoding(_))));
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.37).sin() * 0.9).collect();
        let b = AudioBuffer::new(samples, 8000, "a").unwrap();
        write_wav(&path, &b).unwrap();
        let back = decode_wav(&path).unwrap();
        assert_eq!(back.samples(), b.samples());
        write_wav(&path, &back).unwrap();
        assert_eq!(decode_wav(&path).unwrap().samples(), b.samples());
    }
}
