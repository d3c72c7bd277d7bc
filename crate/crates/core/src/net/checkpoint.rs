//! Model checkpoint (`BCLC`), little-endian throughout:
//!
//! ```text
//! "BCLC" u32:version u32:tensor_count
//! per tensor: u32:name_len name u32:rank u32[rank]:dims f32[prod(dims)]
//! ```
//!
//! Tensors are named `uni.<modality>.<param>` and `fusion.<param>` with
//! `<param>` one of `fwd.w_ih fwd.w_hh fwd.b bwd.* dense.w dense.b head.w
//! head.b`. A final `meta.frozen` tensor holds one 0/1 flag per branch,
//! unimodal branches first.

use std::path::Path;

use super::layers::{Activation, Dense, LstmParams};
use super::model::Branch;
use super::{BcLstmModel, ModalitySpec, ModelConfig};
use crate::error::{Error, Result};
use crate::synth::Reader;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BCLC";
const VERSION: u32 = 1;
const FROZEN: &str = "meta.frozen";

pub fn write_checkpoint(model: &BcLstmModel) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let flags = model
        .unimodal
        .iter()
        .chain([&model.fusion])
        .map(|b| if b.frozen { 1.0 } else { 0.0 })
        .collect();
    tensors.push((FROZEN.into(), Tensor::from_vec(flags)));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Raw named tensors in file order.
pub fn read_state(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` dimensions overflow")))?;
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Rebuilds a model, inferring its architecture from the stored shapes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<BcLstmModel> {
    let state = read_state(bytes)?;
    let mut modalities: Vec<String> = Vec::new();
    for (name, _) in &state {
        if let Some(rest) = name.strip_prefix("uni.") {
            let m = rest.strip_suffix(".fwd.w_ih").filter(|m| !m.is_empty());
            if let Some(m) = m {
                modalities.push(m.to_string());
            }
        }
    }
    let find = |name: &str| -> Result<&Tensor> {
        state
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    };
    let dims2 = |name: &str| -> Result<(usize, usize)> { find(name)?.dims2() };
    let build = |prefix: &str| -> Result<Branch> {
        let p = |s: &str| find(&format!("{prefix}.{s}")).cloned();
        let lstm = |dir: &str| -> Result<LstmParams> {
            let w_hh = p(&format!("{dir}.w_hh"))?;
            let hidden_size = w_hh.shape()[0];
            let params = LstmParams {
                input_weights: p(&format!("{dir}.w_ih"))?,
                recurrent_weights: w_hh,
                biases: p(&format!("{dir}.b"))?,
                hidden_size,
            };
            params.validate()?;
            Ok(params)
        };
        Ok(Branch {
            fwd: lstm("fwd")?,
            bwd: lstm("bwd")?,
            dense: Dense {
                weight: p("dense.w")?,
                bias: p("dense.b")?,
                activation: Activation::Tanh,
            },
            head: Dense {
                weight: p("head.w")?,
                bias: p("head.b")?,
                activation: Activation::Linear,
            },
            frozen: false,
        })
    };
    if modalities.is_empty() {
        return Err(Error::Format("checkpoint has no unimodal branches".into()));
    }
    let first = &modalities[0];
    let (_, uh4) = dims2(&format!("uni.{first}.fwd.w_ih"))?;
    let (_, ud) = dims2(&format!("uni.{first}.dense.w"))?;
    let (fd_in, fh4) = dims2("fusion.fwd.w_ih")?;
    let (_, fd) = dims2("fusion.dense.w")?;
    let (_, k) = dims2("fusion.head.w")?;
    let specs = modalities
        .iter()
        .map(|m| {
            Ok(ModalitySpec {
                name: m.clone(),
                input_dim: dims2(&format!("uni.{m}.fwd.w_ih"))?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        modalities: specs,
        unimodal_hidden: uh4 / 4,
        unimodal_dense: ud,
        fusion_hidden: fh4 / 4,
        fusion_dense: fd,
        class_count: k,
        dropout: 0.0,
    };
    let mut model = BcLstmModel {
        unimodal: modalities
            .iter()
            .map(|m| build(&format!("uni.{m}")))
            .collect::<Result<_>>()?,
        fusion: build("fusion")?,
        config,
    };
    if fd_in != modalities.len() * ud {
        return Err(Error::Format(format!(
            "fusion input width {fd_in} does not match {} unimodal dense outputs of width {ud}",
            modalities.len()
        )));
    }
    model
        .validate()
        .map_err(|e| Error::Format(format!("inconsistent checkpoint: {e}")))?;
    let expected = model.named_tensors().len() + 1;
    if state.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, architecture has {expected}",
            state.len()
        )));
    }
    apply_frozen(&mut model, &state)?;
    Ok(model)
}

fn apply_frozen(model: &mut BcLstmModel, state: &[(String, Tensor)]) -> Result<()> {
    if let Some((_, flags)) = state.iter().find(|(n, _)| n == FROZEN) {
        if flags.len() != model.unimodal.len() + 1 {
            return Err(Error::Format(format!("{FROZEN} has {} flags", flags.len())));
        }
        for (b, &f) in model
            .unimodal
            .iter_mut()
            .chain([&mut model.fusion])
            .zip(flags.data())
        {
            b.frozen = f != 0.0;
        }
    }
    Ok(())
}

/// Loads parameters into an existing architecture; every name and shape
/// must match exactly.
pub fn load_state(model: &mut BcLstmModel, bytes: &[u8]) -> Result<()> {
    let state = read_state(bytes)?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut updates = Vec::with_capacity(names.len());
    for name in &names {
        let (_, t) = state
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Dimension(format!("checkpoint has no tensor `{name}`")))?;
        updates.push(t.clone());
    }
    if state.len() != names.len() + 1 {
        return Err(Error::Dimension(format!(
            "checkpoint holds {} tensors, architecture has {}",
            state.len(),
            names.len() + 1
        )));
    }
    let targets = model
        .unimodal
        .iter_mut()
        .flat_map(|b| b.tensors_mut())
        .chain(model.fusion.tensors_mut());
    let mut pending = Vec::new();
    for ((name, dst), src) in names.iter().zip(targets).zip(updates) {
        if dst.shape() != src.shape() {
            return Err(Error::Dimension(format!(
                "`{name}` is {:?} in the checkpoint but {:?} in the model",
                src.shape(),
                dst.shape()
            )));
        }
        pending.push((dst, src));
    }
    for (dst, src) in pending {
        *dst = src;
    }
    apply_frozen(model, &state)
}

pub fn save_checkpoint(model: &BcLstmModel, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<BcLstmModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, PlantedSpec};

    fn model(classes: usize, seed: u64) -> BcLstmModel {
        let b = generate(&PlantedSpec::default_with_seed(1), 2, 3).unwrap();
        let mut c = ModelConfig::for_batch(&b);
        c.unimodal_hidden = 3;
        c.unimodal_dense = 4;
        c.fusion_hidden = 2;
        c.fusion_dense = 5;
        c.class_count = classes;
        BcLstmModel::new(c, seed).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut m = model(6, 11);
        m.unimodal[1].frozen = true;
        let back = read_checkpoint(&write_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in m.named_tensors().iter().zip(back.named_tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = write_checkpoint(&model(6, 0)).unwrap();
        bytes[1] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file() {
        let bytes = write_checkpoint(&model(6, 0)).unwrap();
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn class_count_mismatch_rejected_on_load() {
        let bytes = write_checkpoint(&model(4, 0)).unwrap();
        let mut target = model(6, 1);
        let before = target.clone();
        assert!(matches!(
            load_state(&mut target, &bytes),
            Err(Error::Dimension(_))
        ));
        assert_eq!(target, before);
        let mut same = model(4, 9);
        load_state(&mut same, &bytes).unwrap();
        assert_eq!(same, model(4, 0));
    }
}
