//! Checkpoint format: a UTF-8 manifest (one `name dtype shape offset` line
//! per tensor, blank-line terminated) followed by the raw little-endian f32
//! blob. Offsets are byte offsets into the blob; save/load round trips are
//! bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;

pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut header = String::new();
    let mut offset = 0usize;
    for e in entries {
        let n: usize = e.shape.iter().product();
        if n != e.data.len() {
            return Err(Error::Checkpoint(format!("{}: shape/data mismatch", e.name)));
        }
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{} f32 {} {}\n", e.name, dims.join("x"), offset));
        offset += 4 * n;
    }
    header.push('\n');
    let mut f = fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    for e in entries {
        for v in &e.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path)?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Checkpoint("missing manifest terminator".to_string()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Checkpoint("manifest is not utf-8".to_string()))?;
    let blob = &bytes[split + 2..];

    let mut entries = Vec::new();
    let mut expected_offset = 0usize;
    for line in header.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Checkpoint(format!("bad manifest line {line:?}")));
        }
        if fields[1] != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", fields[1])));
        }
        let shape: Vec<usize> = fields[2]
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}"))))
            .collect::<Result<_>>()?;
        let offset: usize = fields[3]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset in {line:?}")))?;
        // offsets must tile the blob without gaps or overlaps
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "offset {offset} for {} (expected {expected_offset})",
                fields[0]
            )));
        }
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("{} overruns the blob", fields[0])));
        }
        let data: Vec<f32> = blob[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(Entry { name: fields[0].to_string(), shape, data });
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest covers {expected_offset}",
            blob.len()
        )));
    }
    Ok(entries)
}

/// Serialize every parameter and batch-norm buffer of a model.
pub fn model_entries(model: &Model<f32>) -> Vec<Entry> {
    let mut entries: Vec<Entry> = model
        .named_params()
        .into_iter()
        .map(|(name, p)| Entry {
            name,
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect();
    for (name, data) in model.named_buffers() {
        let shape = vec![data.len()];
        entries.push(Entry { name, shape, data });
    }
    entries
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<()> {
    save(path, &model_entries(model))
}

/// Load a checkpoint into a structurally matching model. Every entry must
/// find its parameter or buffer, with matching shape, and every parameter
/// must be covered.
pub fn load_model(path: &Path, model: &mut Model<f32>) -> Result<()> {
    let entries = load(path)?;
    let mut by_name: std::collections::HashMap<String, Entry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    for (name, p) in model.named_params_mut() {
        let e = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {name}")))?;
        if e.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} != model shape {:?}",
                e.shape,
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(&e.data);
    }
    for (name, e) in by_name {
        model.load_buffer(&name, &e.data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, AnchorSet, ModelConfig};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        let entries = vec![
            Entry { name: "a.w".into(), shape: vec![2, 3], data: vec![1.5, -0.25, 3.25e-8, 0.0, -0.0, f32::MIN_POSITIVE] },
            Entry { name: "b.g".into(), shape: vec![2], data: vec![1.0, 2.0] },
        ];
        save(&p, &entries).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            // compare bit patterns, not float equality
            let abits: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
    }

    #[test]
    fn model_roundtrip_and_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = ModelConfig::toy(2);
        let model = build_model::<f32>(cfg.clone(), AnchorSet::default_for(160)).unwrap();
        save_model(&p, &model).unwrap();

        let mut cfg2 = cfg.clone();
        cfg2.seed = 99; // different init, same structure
        let mut other = build_model::<f32>(cfg2, AnchorSet::default_for(160)).unwrap();
        load_model(&p, &mut other).unwrap();
        for ((_, a), (_, b)) in model.named_params().iter().zip(other.named_params().iter()) {
            let abits: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }

        // structurally different model rejects the checkpoint
        let mut baseline =
            build_model::<f32>(ModelConfig::toy(2).baseline(), AnchorSet::default_for(160))
                .unwrap();
        assert!(load_model(&p, &mut baseline).is_err());
    }
}
