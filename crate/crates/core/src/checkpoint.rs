//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MADANCK1"
//! header_len u64      length of the UTF-8 header in bytes
//! header     key=value lines
//! count      u64      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims as u64 each
//!   data     numel values of the header's `dtype`
//! ```
//!
//! Model parameters are stored as `<network>/<parameter>`, e.g.
//! `g_st.0/stem.weight`. See `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use madan_nn::{Float, Tensor};

use crate::datagen::io::write_atomic;
use crate::error::{MadanError, Result};
use crate::models::{
    DiscriminatorConfig, FeatureDiscriminatorConfig, GeneratorConfig, ModelBundle, ModelConfig, SegmenterConfig,
};

pub const MAGIC: &[u8; 8] = b"MADANCK1";
pub const FORMAT: &str = "madan-checkpoint-1";

/// Header lines plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Default for Archive<T> {
    fn default() -> Self {
        Self {
            header: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Float> Archive<T> {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.header.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn take_tensor(&mut self, name: &str) -> Option<Tensor<T>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(&format!("format={FORMAT}\ndtype={}\n", T::DTYPE));
        for (k, v) in &self.header {
            if k != "format" && k != "dtype" {
                header.push_str(&format!("{k}={v}\n"));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| MadanError::format("checkpoint", path, detail);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = r.u64().ok_or_else(|| bad("truncated header length"))? as usize;
        let htext = r.take(hlen).ok_or_else(|| bad("truncated header"))?;
        let htext = std::str::from_utf8(htext).map_err(|_| bad("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        if header.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("unsupported format tag"));
        }
        match header.get("dtype") {
            Some(d) if d == T::DTYPE => {}
            other => return Err(bad(&format!("dtype {other:?}, expected {}", T::DTYPE))),
        }
        let count = r.u64().ok_or_else(|| bad("truncated tensor count"))?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(|| bad("truncated tensor name"))? as usize;
            let name = r.take(nlen).ok_or_else(|| bad("truncated tensor name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = r.u32().ok_or_else(|| bad("truncated dims"))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64().ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r
                .take(numel * T::BYTES)
                .ok_or_else(|| bad(&format!("truncated data of `{name}`")))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MadanError::io("reading checkpoint", path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join("/")
}

fn split<const N: usize>(s: &str, key: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = s
        .split('/')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MadanError::Config(format!("{key}: `{s}` is not a list of integers")))?;
    parts
        .try_into()
        .map_err(|_| MadanError::Config(format!("{key}: expected {N} values in `{s}`")))
}

/// Architecture keys written to checkpoint headers and resolved configs.
pub fn model_config_entries(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("model.sources", c.sources.to_string()),
        ("model.classes", c.classes.to_string()),
        ("model.seed", c.seed.to_string()),
        ("model.gen_channels", join(&c.generator.channels)),
        ("model.gen_residual_blocks", c.generator.residual_blocks.to_string()),
        ("model.disc_channels", join(&c.discriminator.channels)),
        ("model.seg_channels", join(&c.segmenter.channels)),
        ("model.seg_norm_groups", c.segmenter.norm_groups.to_string()),
        ("model.feat_disc_channels", c.feature_discriminator.channels.to_string()),
    ]
}

/// Inverse of [`model_config_entries`].
pub fn model_config_from(lookup: impl Fn(&str) -> Option<String>) -> Result<ModelConfig> {
    let get = |k: &str| lookup(k).ok_or_else(|| MadanError::Config(format!("missing key {k}")));
    let num = |k: &str| -> Result<usize> {
        let v = get(k)?;
        v.parse()
            .map_err(|_| MadanError::Config(format!("{k}: `{v}` is not an integer")))
    };
    Ok(ModelConfig {
        sources: num("model.sources")?,
        classes: num("model.classes")?,
        seed: get("model.seed")?
            .parse()
            .map_err(|_| MadanError::Config("model.seed is not an integer".into()))?,
        generator: GeneratorConfig {
            channels: split(&get("model.gen_channels")?, "model.gen_channels")?,
            residual_blocks: num("model.gen_residual_blocks")?,
        },
        discriminator: DiscriminatorConfig {
            channels: split(&get("model.disc_channels")?, "model.disc_channels")?,
        },
        segmenter: SegmenterConfig {
            channels: split(&get("model.seg_channels")?, "model.seg_channels")?,
            norm_groups: num("model.seg_norm_groups")?,
        },
        feature_discriminator: FeatureDiscriminatorConfig {
            channels: num("model.feat_disc_channels")?,
        },
    })
}

/// Writes every network of `bundle` into `archive`.
pub fn store_bundle<T: Float>(archive: &mut Archive<T>, bundle: &ModelBundle<T>) {
    for (k, v) in model_config_entries(&bundle.config) {
        archive.set(k, v);
    }
    archive.set("model.source_segmenters_frozen", bundle.source_segmenters_frozen());
    for (prefix, ps) in bundle.named_params() {
        for (name, t) in ps.names().iter().zip(ps.tensors()) {
            archive.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }
}

/// Rebuilds a bundle from `archive`, removing the consumed tensors.
pub fn restore_bundle<T: Float>(archive: &mut Archive<T>, path: &Path) -> Result<ModelBundle<T>> {
    let config = model_config_from(|k| archive.get(k).map(str::to_string))
        .map_err(|e| MadanError::format("checkpoint", path, e.to_string()))?;
    let mut bundle = ModelBundle::new(&config)?;
    for (prefix, ps) in bundle.named_params_mut() {
        let names = ps.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let full = format!("{prefix}/{name}");
            let t = archive
                .take_tensor(&full)
                .ok_or_else(|| MadanError::format("checkpoint", path, format!("missing tensor {full}")))?;
            if t.shape() != ps.get(i).shape() {
                return Err(MadanError::format(
                    "checkpoint",
                    path,
                    format!("{full}: shape {:?}, expected {:?}", t.shape(), ps.get(i).shape()),
                ));
            }
            ps.tensors_mut()[i] = t;
        }
    }
    let frozen = archive.get("model.source_segmenters_frozen") == Some("true");
    bundle.set_source_segmenters_frozen(frozen);
    Ok(bundle)
}

/// Saves just the networks of `bundle` with extra header entries.
pub fn save_bundle<T: Float>(path: &Path, bundle: &ModelBundle<T>, extra: &[(&str, String)]) -> Result<()> {
    let mut a = Archive::default();
    store_bundle(&mut a, bundle);
    for (k, v) in extra {
        a.set(*k, v);
    }
    a.write(path)
}

/// Loads the networks stored in a checkpoint, returning the header too.
pub fn load_bundle<T: Float>(path: &Path) -> Result<(ModelBundle<T>, BTreeMap<String, String>)> {
    let mut a = Archive::read(path)?;
    let bundle = restore_bundle(&mut a, path)?;
    Ok((bundle, a.header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            sources: 2,
            classes: 3,
            generator: GeneratorConfig {
                channels: [2, 4, 4],
                residual_blocks: 1,
            },
            discriminator: DiscriminatorConfig { channels: [2, 2, 2, 2] },
            segmenter: SegmenterConfig {
                channels: [2, 2, 4, 4],
                norm_groups: 2,
            },
            feature_discriminator: FeatureDiscriminatorConfig { channels: 2 },
            seed: 7,
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut b = ModelBundle::<f32>::new(&tiny()).unwrap();
        b.segmenter.params.tensors_mut()[0].data_mut()[0] = 42.5;
        save_bundle(&path, &b, &[("stage", "2".into())]).unwrap();
        let (back, header) = load_bundle::<f32>(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(header["stage"], "2");
        assert_eq!(header["dtype"], "f32");
        assert!(load_bundle::<f64>(&path).is_err());
    }

    #[test]
    fn corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let b = ModelBundle::<f32>::new(&tiny()).unwrap();
        save_bundle(&path, &b, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [4, 20, bytes.len() - 3] {
            assert!(Archive::<f32>::from_bytes(&bytes[..cut], &path).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Archive::<f32>::from_bytes(&bad, &path).is_err());
    }

    #[test]
    fn config_entries_round_trip() {
        let c = ModelConfig::default();
        let entries = model_config_entries(&c);
        let back = model_config_from(|k| entries.iter().find(|(e, _)| *e == k).map(|(_, v)| v.clone())).unwrap();
        assert_eq!(back, c);
    }
}
