//! Checkpoints: a flat name -> tensor map in safetensors format, with the
//! schema version, training stage, config echo and best-validation record in
//! the file's metadata block. Round trips are bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::VarStore;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub stage: String,
    /// JSON echo of the config the run used.
    pub config: String,
    pub best_val_l1: Option<f64>,
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    let mut md = HashMap::new();
    md.insert("schema_version".to_string(), meta.schema_version.to_string());
    md.insert("stage".to_string(), meta.stage.clone());
    md.insert("config".to_string(), meta.config.clone());
    if let Some(v) = meta.best_val_l1 {
        // Bit-exact float round trip via hex bits.
        md.insert("best_val_l1_bits".to_string(), format!("{:016x}", v.to_bits()));
        md.insert("best_val_l1".to_string(), format!("{v}"));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    let iter = tensors.iter().map(|(k, v)| (k.clone(), v));
    safetensors::serialize_to_file(iter, &Some(md), path)
        .map_err(|e| Error::Data(format!("{}: cannot write checkpoint: {e}", path.display())))?;
    Ok(())
}

pub fn load(path: &Path, device: &Device) -> Result<(BTreeMap<String, Tensor>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_n, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Data(format!("{}: bad checkpoint header: {e}", path.display())))?;
    let md = header.metadata().clone().unwrap_or_default();
    let schema_version: u32 = md
        .get("schema_version")
        .ok_or_else(|| Error::Data(format!("{}: missing schema_version", path.display())))?
        .parse()
        .map_err(|_| Error::Data(format!("{}: malformed schema_version", path.display())))?;
    if schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {schema_version} unsupported (expected {SCHEMA_VERSION})",
            path.display()
        )));
    }
    let best_val_l1 = md
        .get("best_val_l1_bits")
        .and_then(|s| u64::from_str_radix(s, 16).ok())
        .map(f64::from_bits);
    let meta = CheckpointMeta {
        schema_version,
        stage: md.get("stage").cloned().unwrap_or_default(),
        config: md.get("config").cloned().unwrap_or_default(),
        best_val_l1,
    };
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((tensors.into_iter().collect(), meta))
}

/// Detached copies of every parameter (safe against later in-place updates).
pub fn snapshot(vs: &VarStore) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, var) in vs.vars() {
        out.insert(name, var.as_tensor().copy()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut vs = VarStore::new(3, DType::F64, dev());
        vs.param("a.weight", &[3, 4], Init::FanIn { fan_in: 4 }).unwrap();
        vs.param("b.bias", &[7], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let tensors = snapshot(&vs).unwrap();
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            stage: "llcn".into(),
            config: "{\"seed\":3}".into(),
            best_val_l1: Some(0.123456789123456789),
        };
        save(&path, &tensors, &meta).unwrap();
        let (loaded, got_meta) = load(&path, &dev()).unwrap();
        assert_eq!(got_meta, meta);
        assert_eq!(loaded.len(), 2);
        for (name, t) in &tensors {
            let a = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = loaded[name].flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // Save -> load -> save -> load is still exact (no drift).
        let path2 = dir.path().join("m2.safetensors");
        save(&path2, &loaded, &got_meta).unwrap();
        let (loaded2, meta2) = load(&path2, &dev()).unwrap();
        assert_eq!(meta2, meta);
        for (name, t) in &loaded {
            let a = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = loaded2[name].flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn snapshot_is_detached_from_training() {
        let mut vs = VarStore::new(0, DType::F64, dev());
        vs.param("w", &[2], Init::Const(1.0)).unwrap();
        let snap = snapshot(&vs).unwrap();
        vs.get("w")
            .unwrap()
            .set(&Tensor::full(9f64, (2,), &dev()).unwrap())
            .unwrap();
        assert_eq!(snap["w"].to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn rejects_wrong_schema_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut vs = VarStore::new(0, DType::F64, dev());
        vs.param("w", &[2], Init::Zeros).unwrap();
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            stage: "x".into(),
            config: String::new(),
            best_val_l1: None,
        };
        let tensors = snapshot(&vs).unwrap();
        // Tamper: write metadata claiming a different version.
        let mut bad = meta.clone();
        bad.schema_version = 99;
        // save() stamps whatever the meta says; load() must refuse it.
        save(&path, &tensors, &bad).unwrap();
        assert!(matches!(load(&path, &dev()), Err(Error::Data(_))));
        assert!(load(&dir.path().join("absent.safetensors"), &dev()).is_err());
    }

    #[test]
    fn assign_round_trip_through_model() {
        use crate::llcn::{Llcn, LlcnConfig, LlcnKind};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("llcn.safetensors");
        let cfg = LlcnConfig::tiny();
        let mut vs = VarStore::new(11, DType::F64, dev());
        let _model = Llcn::new(&mut vs, "llcn", &cfg, LlcnKind::Llcm).unwrap();
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            stage: "llcn".into(),
            config: String::new(),
            best_val_l1: None,
        };
        save(&path, &snapshot(&vs).unwrap(), &meta).unwrap();
        // Fresh model with a different seed, then load the saved weights.
        let mut vs2 = VarStore::new(999, DType::F64, dev());
        let model2 = Llcn::new(&mut vs2, "llcn", &cfg, LlcnKind::Llcm).unwrap();
        let (tensors, _) = load(&path, &dev()).unwrap();
        vs2.assign(&tensors, false).unwrap();
        let i = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev()).unwrap();
        // Original model output reproduced exactly.
        let mut vs1 = VarStore::new(11, DType::F64, dev());
        let model1 = Llcn::new(&mut vs1, "llcn", &cfg, LlcnKind::Llcm).unwrap();
        let a = model1.forward(&i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = model2.forward(&i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        // Unknown names rejected unless explicitly allowed.
        let mut extra = tensors.clone();
        extra.insert("nope".into(), Tensor::zeros((1,), DType::F64, &dev()).unwrap());
        assert!(vs2.assign(&extra, false).is_err());
        assert!(vs2.assign(&extra, true).is_ok());
    }
}
