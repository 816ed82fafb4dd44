//! Checkpoint files: a text manifest plus a little-endian blob.
//!
//! ```text
//! MLAT1
//! blob = model.ckpt.bin
//! meta latent_dim = 64
//! tensor name=enc.conv0.w shape=16,1,3,3 dtype=f64 offset=0
//! ```
//!
//! The blob lives next to the manifest under the name given by `blob`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{NumError, Tensor};

pub const MAGIC: &str = "MLAT1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn parse(s: &str) -> Result<Self, NumError> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(NumError::Checkpoint(format!("unknown dtype {other}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str, NumError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NumError::Checkpoint(format!("missing meta key {key}")))
    }
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut name = manifest
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".bin");
    manifest.with_file_name(name)
}

pub fn save(path: &Path, ckpt: &Checkpoint, dtype: DType) -> Result<(), NumError> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| NumError::Checkpoint("invalid checkpoint path".into()))?
        .to_string();
    let mut manifest = format!("{MAGIC}\nblob = {blob_name}\n");
    for (k, v) in &ckpt.meta {
        if k.contains([' ', '=', '\n']) || v.contains('\n') {
            return Err(NumError::Checkpoint(format!(
                "meta entry {k:?} is not representable"
            )));
        }
        manifest.push_str(&format!("meta {k} = {v}\n"));
    }
    let mut blob = Vec::new();
    for (name, t) in &ckpt.tensors {
        if name.contains([' ', '=', '\n']) {
            return Err(NumError::Checkpoint(format!(
                "tensor name {name:?} is not representable"
            )));
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor name={name} shape={} dtype={} offset={}\n",
            shape.join(","),
            dtype.as_str(),
            blob.len()
        ));
        for v in t.data() {
            match dtype {
                DType::F32 => blob.extend_from_slice(&(*v as f32).to_le_bytes()),
                DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    fs::write(path, manifest)?;
    fs::write(blob_file, blob)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, NumError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(NumError::Checkpoint(format!(
            "{} does not start with {MAGIC}",
            path.display()
        )));
    }
    let mut blob = None;
    let mut ckpt = Checkpoint::default();
    let mut entries = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("blob = ") {
            blob = Some(fs::read(path.with_file_name(rest.trim()))?);
        } else if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once(" = ")
                .ok_or_else(|| NumError::Checkpoint(format!("bad meta line {line:?}")))?;
            ckpt.meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut fields = BTreeMap::new();
            for kv in rest.split_whitespace() {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| NumError::Checkpoint(format!("bad tensor field {kv:?}")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| NumError::Checkpoint(format!("tensor line missing {k}")))
            };
            let shape = get("shape")?
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| NumError::Checkpoint(format!("bad shape: {e}")))?;
            let offset: usize = get("offset")?
                .parse()
                .map_err(|e| NumError::Checkpoint(format!("bad offset: {e}")))?;
            entries.push((
                get("name")?.to_string(),
                shape,
                DType::parse(get("dtype")?)?,
                offset,
            ));
        } else {
            return Err(NumError::Checkpoint(format!("unrecognized line {line:?}")));
        }
    }
    let blob = blob.ok_or_else(|| NumError::Checkpoint("manifest names no blob".into()))?;
    for (name, shape, dtype, offset) in entries {
        let numel: usize = shape.iter().product();
        let end = offset + numel * dtype.width();
        let bytes = blob.get(offset..end).ok_or_else(|| {
            NumError::Checkpoint(format!("tensor {name} extends past end of blob"))
        })?;
        let data = bytes
            .chunks_exact(dtype.width())
            .map(|c| match dtype {
                DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        ckpt.tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.meta.insert("latent_dim".into(), "64".into());
        c.tensors.push((
            "a.w".into(),
            Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2),
        ));
        c.tensors
            .push(("b".into(), Tensor::scalar(std::f64::consts::PI)));
        c
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample(), DType::F64).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
        let head = fs::read_to_string(&path).unwrap();
        assert!(head.starts_with("MLAT1\n"));
        assert!(head.contains("tensor name=b shape=1 dtype=f64 offset=48"));
    }

    #[test]
    fn f32_blob_rounds_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample(), DType::F32).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(fs::metadata(blob_path(&path)).unwrap().len(), 7 * 4);
        let pi = back.tensor("b").unwrap().data()[0];
        assert_eq!(pi, std::f32::consts::PI as f64);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, "MLAT0\n").unwrap();
        assert!(matches!(load(&path), Err(NumError::Checkpoint(_))));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample(), DType::F64).unwrap();
        fs::write(blob_path(&path), [0u8; 10]).unwrap();
        assert!(load(&path).is_err());
    }
}
