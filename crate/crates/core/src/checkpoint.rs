//! Binary tensor containers with a TOML metadata block.
//!
//! Layout (little endian): magic `NERFIDCK`, `u32` version, `u8` element
//! width (4 or 8), `u64` metadata length and UTF-8 metadata, `u64` tensor
//! count, then per tensor: `u32` name length, name, `u32` rank, `u64` dims,
//! raw elements.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, Real, Tensor};
use crate::scenes::Dataset;
use crate::trainer::{Adam, Model, Progress, RunConfig, Trainer};

const MAGIC: &[u8; 8] = b"NERFIDCK";
const VERSION: u32 = 1;

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode<T: Real>(meta: &str, tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let width = std::mem::size_of::<T>();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width as u8);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            if width == 4 {
                out.extend_from_slice(&v.to_f32().expect("f32").to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64().expect("f64").to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Invalid("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Invalid("checkpoint length overflows".into()))
    }
}

/// Decodes a container written by [`encode`] with the same element type.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor<T>)>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Invalid("not a nerf-id checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
    }
    let width = r.take(1)?[0] as usize;
    if width != std::mem::size_of::<T>() {
        return Err(Error::Invalid(format!(
            "checkpoint holds {}-byte floats, expected {}",
            width,
            std::mem::size_of::<T>()
        )));
    }
    let n = r.len()?;
    let meta = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Invalid("metadata is not UTF-8".into()))?;
    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Invalid("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Invalid("tensor size overflows".into()))?;
        let raw = r.take(len.checked_mul(width).ok_or_else(|| Error::Invalid("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                } else {
                    T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((meta, tensors))
}

/// Element width in bytes (4 or 8) of the checkpoint at `path`.
pub fn element_width(path: &Path) -> Result<usize> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Invalid(format!("{} is not a nerf-id checkpoint", path.display())));
    }
    r.u32()?;
    Ok(r.take(1)?[0] as usize)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: RunConfig,
    progress: Option<Progress>,
    /// ChaCha word position of the data stream, as a decimal string.
    rng_word_pos: Option<String>,
    adam_step: Option<u64>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn store_tensors<T: Real>(prefix: &str, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
    store.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
}

fn fill<T: Real>(store: &mut ParamStore<T>, prefix: &str, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}{}", store.name(id));
        let t = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor `{name}`")))?;
        let own = store.name(id).to_string();
        store.set(&own, t.1.clone())?;
    }
    Ok(())
}

fn meta_text(meta: &Meta) -> String {
    toml::to_string(meta).expect("metadata serializes")
}

fn parse_meta(text: &str) -> Result<Meta> {
    toml::from_str(text).map_err(|e| Error::Invalid(format!("checkpoint metadata: {}", e.message())))
}

/// Saves model parameters together with the run configuration.
pub fn save_model<T: Real>(path: &Path, config: &RunConfig, model: &Model<T>) -> Result<()> {
    let meta = Meta { kind: "model".into(), config: config.clone(), progress: None, rng_word_pos: None, adam_step: None };
    write_atomic(path, &encode(&meta_text(&meta), &store_tensors("", &model.store)))
}

/// Loads a model checkpoint (or the current parameters of a training checkpoint).
pub fn load_model<T: Real>(path: &Path) -> Result<(RunConfig, Model<T>)> {
    let (meta, tensors) = decode::<T>(&read_file(path)?)?;
    let meta = parse_meta(&meta)?;
    let mut model = Model::new(meta.config.model.clone(), meta.config.train.seed)?;
    fill(&mut model.store, "", &tensors)?;
    Ok((meta.config, model))
}

/// Saves the complete training state: parameters, Adam moments, counters,
/// data-stream position and the best parameters so far.
pub fn save_trainer<T: Real>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    let mut tensors = store_tensors("", &trainer.model.store);
    for (i, (name, _)) in trainer.model.store.iter().enumerate() {
        tensors.push((format!("adam.m/{name}"), trainer.adam.m[i].clone()));
        tensors.push((format!("adam.v/{name}"), trainer.adam.v[i].clone()));
    }
    if let Some(best) = &trainer.best {
        tensors.extend(store_tensors("best/", best));
    }
    let meta = Meta {
        kind: "train".into(),
        config: trainer.config.clone(),
        progress: Some(trainer.progress.clone()),
        rng_word_pos: Some(trainer.rng().get_word_pos().to_string()),
        adam_step: Some(trainer.adam.step),
    };
    write_atomic(path, &encode(&meta_text(&meta), &tensors))
}

/// Restores a trainer saved by [`save_trainer`] on the same dataset.
pub fn load_trainer<T: Real>(path: &Path, dataset: &Dataset) -> Result<Trainer<T>> {
    let (meta, tensors) = decode::<T>(&read_file(path)?)?;
    let meta = parse_meta(&meta)?;
    let (Some(progress), Some(pos), Some(step)) = (meta.progress, meta.rng_word_pos, meta.adam_step) else {
        return Err(Error::Invalid(format!("{} is not a training checkpoint", path.display())));
    };
    let pos: u128 = pos.parse().map_err(|_| Error::Invalid("bad rng position".into()))?;
    let mut model = Model::new(meta.config.model.clone(), meta.config.train.seed)?;
    fill(&mut model.store, "", &tensors)?;
    let mut adam = Adam::new(&model.store);
    let mut moments = model.store.clone();
    fill(&mut moments, "adam.m/", &tensors)?;
    adam.m = moments.iter().map(|(_, t)| t.clone()).collect();
    fill(&mut moments, "adam.v/", &tensors)?;
    adam.v = moments.iter().map(|(_, t)| t.clone()).collect();
    adam.step = step;
    let best = if tensors.iter().any(|(n, _)| n.starts_with("best/")) {
        let mut b = model.store.clone();
        fill(&mut b, "best/", &tensors)?;
        Some(b)
    } else {
        None
    };
    let mut trainer = Trainer::with_model(meta.config, model, dataset)?;
    trainer.restore(adam, progress, pos, best);
    Ok(trainer)
}
