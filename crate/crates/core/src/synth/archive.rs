//! Feature archive (`MMER`), little-endian throughout:
//!
//! ```text
//! "MMER" u32:version u32:modality_count
//! per modality: u32:name_len name u32:n u32:t u32:d f32[n*t*d]
//! u8[n*t] mask, u8[n*t] labels (255 = padded)
//! blocks, each starting with a u8 tag:
//!   1  waveforms:   per slot u32:sample_count (0 = none) [u32:sample_rate i16[count]]
//!   2  transcripts: per slot u32:token_count (u32::MAX = none) {u32:len utf8}*
//!   0  end of archive
//! ```

use std::path::Path;

use super::{ConversationBatch, ModalityFeatures, Waveform, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMER";
const VERSION: u32 = 1;
const TAG_END: u8 = 0;
const TAG_WAVEFORMS: u8 = 1;
const TAG_TRANSCRIPTS: u8 = 2;
const NO_TRANSCRIPT: u32 = u32::MAX;

pub fn write_features(batch: &ConversationBatch) -> Result<Vec<u8>> {
    batch.validate(CLASS_COUNT)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(batch.modalities.len())?);
    for m in &batch.modalities {
        let (n, t, d) = m.features.dims3()?;
        put_str(&mut out, &m.name)?;
        for x in [n, t, d] {
            put_u32(&mut out, to_u32(x)?);
        }
        for v in m.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend(batch.mask.iter().map(|&m| u8::from(m)));
    out.extend_from_slice(&batch.labels);
    if let Some(waves) = &batch.waveforms {
        out.push(TAG_WAVEFORMS);
        for w in waves {
            match w {
                Some(w) if !w.samples.is_empty() => {
                    put_u32(&mut out, to_u32(w.samples.len())?);
                    put_u32(&mut out, w.sample_rate_hz);
                    for s in &w.samples {
                        out.extend_from_slice(&s.to_le_bytes());
                    }
                }
                _ => put_u32(&mut out, 0),
            }
        }
    }
    if let Some(scripts) = &batch.transcripts {
        out.push(TAG_TRANSCRIPTS);
        for t in scripts {
            match t {
                Some(tokens) => {
                    put_u32(&mut out, to_u32(tokens.len())?);
                    for tok in tokens {
                        put_str(&mut out, tok)?;
                    }
                }
                None => put_u32(&mut out, NO_TRANSCRIPT),
            }
        }
    }
    out.push(TAG_END);
    Ok(out)
}

pub fn read_features(bytes: &[u8]) -> Result<ConversationBatch> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a feature archive (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported archive version {version}"
        )));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Format("archive declares no modalities".into()));
    }
    let mut modalities = Vec::with_capacity(count);
    let mut dims: Option<(usize, usize)> = None;
    for i in 0..count {
        let name = r.string().map_err(|_| {
            Error::Format(format!(
                "archive declares {count} modalities but block {} is missing",
                i + 1
            ))
        })?;
        let (n, t, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        match dims {
            Some((n0, t0)) if (n0, t0) != (n, t) => {
                return Err(Error::Format(format!(
                    "modality `{name}` is {n}x{t} but earlier modalities are {n0}x{t0}"
                )));
            }
            _ => dims = Some((n, t)),
        }
        let len = n
            .checked_mul(t)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("modality `{name}` dimensions overflow")))?;
        let raw = r
            .take(len * 4)
            .map_err(|_| Error::Integrity(format!("modality `{name}` data is truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        modalities.push(ModalityFeatures {
            name,
            features: Tensor::new(vec![n, t, d], data)?,
        });
    }
    let (n, t) = dims.expect("at least one modality");
    let slots = n * t;
    let mask_raw = r.take(slots)?;
    if let Some(b) = mask_raw.iter().find(|&&b| b > 1) {
        return Err(Error::Format(format!("mask byte {b} is not 0 or 1")));
    }
    let mask = mask_raw.iter().map(|&b| b == 1).collect();
    let labels = r.take(slots)?.to_vec();

    let mut waveforms = None;
    let mut transcripts = None;
    loop {
        match r.u8()? {
            TAG_END => break,
            TAG_WAVEFORMS => {
                let mut waves = Vec::with_capacity(slots);
                for _ in 0..slots {
                    let count = r.u32()? as usize;
                    if count == 0 {
                        waves.push(None);
                        continue;
                    }
                    let sample_rate_hz = r.u32()?;
                    let raw = r.take(count * 2)?;
                    let samples = raw
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]))
                        .collect();
                    waves.push(Some(Waveform {
                        samples,
                        sample_rate_hz,
                    }));
                }
                waveforms = Some(waves);
            }
            TAG_TRANSCRIPTS => {
                let mut scripts = Vec::with_capacity(slots);
                for _ in 0..slots {
                    let count = r.u32()?;
                    if count == NO_TRANSCRIPT {
                        scripts.push(None);
                        continue;
                    }
                    let tokens = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
                    scripts.push(Some(tokens));
                }
                transcripts = Some(scripts);
            }
            tag => return Err(Error::Format(format!("unknown sidecar block tag {tag}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after end of archive",
            bytes.len() - r.pos
        )));
    }
    let batch = ConversationBatch {
        modalities,
        mask,
        labels,
        n_videos: n,
        t_max: t,
        waveforms,
        transcripts,
    };
    batch.validate(CLASS_COUNT)?;
    Ok(batch)
}

pub fn export_features(batch: &ConversationBatch, path: &Path) -> Result<()> {
    let bytes = write_features(batch)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn import_features(path: &Path) -> Result<ConversationBatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(&bytes)
}

fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, to_u32(s.len())?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Integrity(format!(
                    "file truncated: need {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::fixtures::two_video_batch;
    use crate::synth::{generate, PlantedSpec, PAD_LABEL};

    #[test]
    fn generated_batch_roundtrips() {
        let b = generate(&PlantedSpec::default_with_seed(9), 3, 4).unwrap();
        let bytes = write_features(&b).unwrap();
        assert_eq!(read_features(&bytes).unwrap(), b);
    }

    #[test]
    fn hand_fixture_lengths() {
        // Two videos, lengths {3, 2}, labels spanning the label range.
        let mut b = two_video_batch();
        b.labels = vec![0, 1, 2, 3, 5, PAD_LABEL];
        let back = read_features(&write_features(&b).unwrap()).unwrap();
        assert_eq!(back.lengths(), vec![3, 2]);
        assert_eq!(back.labels, b.labels);
        assert!(back.waveforms.is_none() && back.transcripts.is_none());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = write_features(&two_video_batch()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_features(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_integrity_error() {
        let bytes = write_features(&two_video_batch()).unwrap();
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(read_features(cut), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_label_is_format_error() {
        let mut bytes = write_features(&two_video_batch()).unwrap();
        // labels start right after the mask; last byte before TAG_END is the
        // padded label of slot 5, slot 0 is six bytes earlier.
        let label0 = bytes.len() - 1 - 6;
        bytes[label0] = 7;
        let msg = read_features(&bytes).unwrap_err().to_string();
        assert!(msg.contains("unknown label"), "{msg}");
    }

    #[test]
    fn inconsistent_modality_dims_rejected() {
        let mut b = two_video_batch();
        let mut other = b.modalities[0].clone();
        other.name = "text".into();
        b.modalities.push(other);
        let mut bytes = write_features(&b).unwrap();
        // second modality header: after magic, version, count and first block
        let first_block = 4 + 4 + 4 + (4 + 5) + 12 + 2 * 3 * 2 * 4;
        let n_offset = first_block + 4 + 4;
        bytes[n_offset..n_offset + 4].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_features(&bytes), Err(Error::Format(_))));
    }
}
