use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{DspError, Waveform};

/// `round(x * 32768)` clamped to i16 range; full scale maps to 32767.
pub fn quantize_sample(x: f64) -> i16 {
    let q = (x * 32768.0).round();
    q.clamp(-32768.0, 32767.0) as i16
}

pub fn dequantize_sample(q: i16) -> f64 {
    q as f64 / 32768.0
}

/// Reads a mono 16-bit PCM RIFF/WAVE file. Unknown chunks are skipped
/// (word-aligned); `fmt ` must precede `data`.
pub fn read_wav(path: &Path) -> Result<Waveform, DspError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::Format(format!(
            "{} is not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = LittleEndian::read_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(DspError::Format(format!(
                "truncated chunk {:?} in {}",
                String::from_utf8_lossy(id),
                path.display()
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(DspError::Format("fmt chunk too short".into()));
                }
                let audio_format = LittleEndian::read_u16(&body[0..2]);
                let channels = LittleEndian::read_u16(&body[2..4]);
                let sample_rate = LittleEndian::read_u32(&body[4..8]);
                let bits = LittleEndian::read_u16(&body[14..16]);
                fmt = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                let (audio_format, channels, sample_rate, bits) = fmt.ok_or_else(|| {
                    DspError::Format("data chunk before fmt chunk".into())
                })?;
                if audio_format != 1 {
                    return Err(DspError::Unsupported(format!(
                        "audio format {audio_format}, only PCM (1) is supported"
                    )));
                }
                if channels != 1 {
                    return Err(DspError::Unsupported(format!(
                        "{channels} channels, only mono is supported"
                    )));
                }
                if bits != 16 {
                    return Err(DspError::Unsupported(format!(
                        "{bits}-bit samples, only 16-bit is supported"
                    )));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|c| dequantize_sample(LittleEndian::read_i16(c)))
                    .collect();
                return Ok(Waveform::new(samples, sample_rate));
            }
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    Err(DspError::Format(format!(
        "{} has no data chunk",
        path.display()
    )))
}

/// Writes mono 16-bit PCM. Samples outside [-1, 1] clip.
pub fn write_wav(path: &Path, wf: &Waveform) -> Result<(), DspError> {
    let data_len = wf.samples.len() * 2;
    let mut out: Vec<u8> = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.write_u32::<LittleEndian>((36 + data_len) as u32)?;
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.write_u32::<LittleEndian>(16)?;
    out.write_u16::<LittleEndian>(1)?; // PCM
    out.write_u16::<LittleEndian>(1)?; // mono
    out.write_u32::<LittleEndian>(wf.sample_rate)?;
    out.write_u32::<LittleEndian>(wf.sample_rate * 2)?; // byte rate
    out.write_u16::<LittleEndian>(2)?; // block align
    out.write_u16::<LittleEndian>(16)?; // bits per sample
    out.extend_from_slice(b"data");
    out.write_u32::<LittleEndian>(data_len as u32)?;
    for &s in &wf.samples {
        out.write_i16::<LittleEndian>(quantize_sample(s))?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
