//! Parameter snapshots: a safetensors archive plus a JSON sidecar holding
//! the iteration, the configuration fingerprint and the training phase.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{R2dError, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Swa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub fingerprint: String,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Sidecar path of an archive: same stem, `.json` extension.
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| R2dError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| R2dError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| R2dError::io(&tmp, e))?;
    f.sync_all().map_err(|e| R2dError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| R2dError::io(path, e))
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: CheckpointMeta) -> Self {
        let tensors = store
            .named_tensors()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Copies every tensor into `store` after checking the fingerprint.
    pub fn apply_to(&self, store: &mut ParamStore, fingerprint: &str) -> Result<()> {
        self.check_fingerprint(fingerprint)?;
        store.load_named(&self.tensors)
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.meta.fingerprint != fingerprint {
            return Err(R2dError::Checkpoint(format!(
                "fingerprint mismatch: checkpoint {} vs configuration {}",
                self.meta.fingerprint, fingerprint
            )));
        }
        Ok(())
    }

    pub fn save(&self, archive: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), raw, t.dims().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, raw, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| R2dError::Checkpoint(format!("{k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let info: HashMap<String, String> =
            [("meta".to_string(), serde_json::to_string(&self.meta)?)].into();
        let blob = safetensors::serialize(views, &Some(info))
            .map_err(|e| R2dError::Checkpoint(e.to_string()))?;
        write_atomic(archive, &blob)?;
        write_atomic(
            &sidecar_path(archive),
            serde_json::to_string_pretty(&self.meta)?.as_bytes(),
        )
    }

    pub fn load(archive: &Path) -> Result<Self> {
        let side = sidecar_path(archive);
        let meta_text = fs::read_to_string(&side).map_err(|e| R2dError::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
        let blob = fs::read(archive).map_err(|e| R2dError::io(archive, e))?;
        let st = SafeTensors::deserialize(&blob)
            .map_err(|e| R2dError::Checkpoint(format!("{}: {e}", archive.display())))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 || view.shape().len() != 4 {
                return Err(R2dError::Checkpoint(format!(
                    "{name}: expected a 4-d f32 tensor"
                )));
            }
            let s = view.shape();
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec([s[0], s[1], s[2], s[3]], data));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add_param(
            "a.weight",
            Tensor::from_fn([2, 1, 3, 3], |o, _, y, x| {
                (o * 9 + y * 3 + x) as f32 * 0.1 - 0.4
            }),
            ParamKind::Weight,
        );
        s.add_param(
            "a.bias",
            Tensor::from_vec([1, 2, 1, 1], vec![1e-30, -7.5]),
            ParamKind::Bias,
        );
        s.add_buffer("bn.running_var", Tensor::full([1, 2, 1, 1], 0.25));
        s
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            iteration: 42,
            fingerprint: "abc".into(),
            phase: Phase::Finetune,
        };
        let ck = Checkpoint::from_store(&store(), meta);
        let path = dir.path().join("sub/ckpt.safetensors");
        ck.save(&path).unwrap();
        assert!(sidecar_path(&path).is_file());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut other = store();
        other
            .param_mut(other.param_id("a.bias").unwrap())
            .value
            .data_mut()[1] = 0.0;
        back.apply_to(&mut other, "abc").unwrap();
        assert_eq!(other.named_tensors(), store().named_tensors());
        assert!(matches!(
            back.apply_to(&mut other, "xyz"),
            Err(R2dError::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        Checkpoint::from_store(
            &store(),
            CheckpointMeta {
                iteration: 1,
                fingerprint: "f".into(),
                phase: Phase::Pretrain,
            },
        )
        .save(&path)
        .unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
