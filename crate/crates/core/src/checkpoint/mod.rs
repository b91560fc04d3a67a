//! Named-tensor checkpoints, diff reports, and surgery applied directly to
//! checkpoint files.

mod format;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use format::{decode, encode, HEADER_LEN, MAGIC, VERSION};

use crate::error::{io_err, Error, Result};
use crate::model::{ParamMap, VideoModel, POS_EMBED_SOURCE};
use crate::surgery::{extend_positional_embedding, identity_adapter, ExtensionPlan};
use crate::tensor::Tensor;
use crate::trainer::TRAIN_PREFIX;

fn lock_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".lock");
    PathBuf::from(s)
}

struct WriteLock(PathBuf);

impl WriteLock {
    fn acquire(path: &Path) -> Result<WriteLock> {
        let lock = lock_path(path);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(WriteLock(lock)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path.to_path_buf())),
            Err(e) => Err(io_err(format!("creating {}", lock.display()))(e)),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Writes `tensors` to `path`. The file appears atomically; a concurrent
/// writer to the same path fails with [`Error::Locked`].
pub fn save(tensors: &ParamMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensors)?;
    let _lock = WriteLock::acquire(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(format!("creating {}", tmp.display())))?;
        f.write_all(&bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
        f.sync_all().map_err(io_err(format!("syncing {}", tmp.display())))?;
    }
    fs::rename(&tmp, path).map_err(io_err(format!("renaming onto {}", path.display())))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    decode(&bytes)
}

pub fn save_model(model: &VideoModel, path: impl AsRef<Path>) -> Result<()> {
    save(&model.state_dict(), path)
}

/// Loads a model, ignoring any `train.*` optimizer state stored alongside it.
pub fn load_model(path: impl AsRef<Path>) -> Result<VideoModel> {
    let mut tensors = load(path)?;
    tensors.retain(|name, _| !name.starts_with(TRAIN_PREFIX));
    VideoModel::from_state_dict(tensors)
}

/// Differences between two tensor sets. The five categories partition the
/// union of names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub shape_changed: Vec<ShapeChange>,
    pub value_changed: Vec<ValueChange>,
    pub unchanged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeChange {
    pub name: String,
    pub old: Vec<usize>,
    pub new: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueChange {
    pub name: String,
    pub max_abs_diff: f32,
}

impl DiffReport {
    /// True when both sides hold the same names with bit-identical tensors.
    pub fn is_identical(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.shape_changed.is_empty() && self.value_changed.is_empty()
    }

    pub fn total(&self) -> usize {
        self.added.len() + self.removed.len() + self.shape_changed.len() + self.value_changed.len() + self.unchanged
    }
}

pub fn diff(old: &ParamMap, new: &ParamMap) -> DiffReport {
    let mut r = DiffReport::default();
    for (name, a) in old {
        match new.get(name) {
            None => r.removed.push(name.clone()),
            Some(b) if a.shape() != b.shape() => r.shape_changed.push(ShapeChange {
                name: name.clone(),
                old: a.shape().to_vec(),
                new: b.shape().to_vec(),
            }),
            Some(b) if a.bit_eq(b) => r.unchanged += 1,
            Some(b) => r.value_changed.push(ValueChange {
                name: name.clone(),
                max_abs_diff: a.max_abs_diff(b).expect("shapes checked"),
            }),
        }
    }
    r.added = new.keys().filter(|k| !old.contains_key(*k)).cloned().collect();
    r
}

/// Applies `plan` to a tensor set: every `*.temporal.pos_embed` table with
/// `T0` rows is tiled to `T_ext` rows, its original is kept under
/// `*.temporal.pos_embed_source`, and an identity adapter is added beside it.
pub fn extend_tensors(tensors: &ParamMap, plan: &ExtensionPlan) -> Result<ParamMap> {
    plan.validate()?;
    let suffix = ".temporal.pos_embed";
    let tables: Vec<(&String, &Tensor)> = tensors.iter().filter(|(k, _)| k.ends_with(suffix)).collect();
    if tables.is_empty() {
        return Err(Error::Surgery("no temporal positional tables found".to_string()));
    }
    let mut out = tensors.clone();
    for (name, pe) in tables {
        let block = &name[..name.len() - ".pos_embed".len()];
        if tensors.contains_key(&format!("{block}.adapter.weight")) {
            return Err(Error::Surgery(format!("{block} already has an adapter")));
        }
        if pe.ndim() != 2 || pe.shape()[0] != plan.base_frames {
            return Err(Error::Surgery(format!(
                "`{name}` has shape {:?}, expected {} leading rows",
                pe.shape(),
                plan.base_frames
            )));
        }
        let channels = pe.shape()[1];
        out.insert(name.clone(), extend_positional_embedding(pe, plan.extended_frames)?);
        out.insert(format!("{block}.{POS_EMBED_SOURCE}"), pe.detach());
        let (w, b) = identity_adapter(channels, plan.adapter_kernel)?;
        out.insert(format!("{block}.adapter.weight"), w);
        out.insert(format!("{block}.adapter.bias"), b);
    }
    Ok(out)
}

/// Reads `in_path`, extends it, writes `out_path`, and reports what changed.
pub fn surgery_on_checkpoint(
    in_path: impl AsRef<Path>,
    plan: &ExtensionPlan,
    out_path: impl AsRef<Path>,
) -> Result<DiffReport> {
    let before = load(in_path)?;
    let after = extend_tensors(&before, plan)?;
    save(&after, out_path)?;
    Ok(diff(&before, &after))
}

/// Whether `weight: [C, C, kT, kH, kW]` is the identity kernel.
pub fn is_identity_kernel(weight: &Tensor) -> bool {
    let &[co, ci, kt, kh, kw] = weight.shape() else { return false };
    if co != ci || kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return false;
    }
    let taps = kt * kh * kw;
    let center = (kt / 2) * kh * kw + (kh / 2) * kw + kw / 2;
    weight.data().iter().enumerate().all(|(i, &v)| {
        let (o, rest) = (i / (ci * taps), i % (ci * taps));
        let (c, tap) = (rest / taps, rest % taps);
        let want = if o == c && tap == center { 1.0 } else { 0.0 };
        v.to_bits() == f32::to_bits(want)
    })
}
