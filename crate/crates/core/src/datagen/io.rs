//! On-disk datasets: binary PPM images, binary PGM label maps and a flat
//! `manifest.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{layout_seed, render_scene, sample_domain_spec, DomainSpec, LabelMap, RgbImage, NUM_CLASSES};
use crate::error::{MadanError, Result};
use crate::rng::RNG_DESCRIPTION;

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_TAG: &str = "madan-dataset-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    pub height: usize,
    pub width: usize,
    /// Whether label files are written (sources, evaluation splits) or not
    /// (the unlabeled target training split).
    pub labeled: bool,
    /// Index of the first layout drawn from the spec's seed; held-out splits
    /// start past the training split.
    pub first_index: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            labeled: true,
            first_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub image_sha256: String,
    pub label: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub domain_id: String,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labeled: bool,
    pub first_index: u64,
    pub rng: String,
    pub spec: DomainSpec,
    pub spec_hash: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: Option<LabelMap>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn is_labeled(&self) -> bool {
        self.manifest.labeled
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;
    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(label: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", label.width, label.height).into_bytes();
    out.extend_from_slice(&label.data);
    out
}

/// Parses a binary Netpbm header (`magic`, width, height, maxval) and
/// returns `(width, height, payload)`.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |d: &str| MadanError::format("netpbm file", path, d.to_string());
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad("wrong magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
    }
    if fields[2] != 255 {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    Ok((fields[0], fields[1], bytes.get(pos..).ok_or_else(|| bad("truncated"))?))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (w, h, payload) = parse_netpbm(bytes, b"P6", path)?;
    if payload.len() != 3 * w * h {
        return Err(MadanError::format(
            "ppm",
            path,
            format!("payload {} != {}", payload.len(), 3 * w * h),
        ));
    }
    Ok(RgbImage {
        height: h,
        width: w,
        data: payload.to_vec(),
    })
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (w, h, payload) = parse_netpbm(bytes, b"P5", path)?;
    if payload.len() != w * h {
        return Err(MadanError::format(
            "pgm",
            path,
            format!("payload {} != {}", payload.len(), w * h),
        ));
    }
    Ok(LabelMap {
        height: h,
        width: w,
        data: payload.to_vec(),
    })
}

/// Writes via a temporary sibling and renames, so readers never observe a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| MadanError::io("write", &tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| MadanError::io("rename", path, e))
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("format={FORMAT_TAG}"),
            format!("domain_id={}", self.domain_id),
            format!("n={}", self.n),
            format!("height={}", self.height),
            format!("width={}", self.width),
            format!("classes={}", self.classes),
            format!("labeled={}", self.labeled),
            format!("first_index={}", self.first_index),
            format!("rng={}", self.rng),
        ];
        lines.extend(self.spec.canonical_lines().into_iter().map(|(k, v)| format!("{k}={v}")));
        lines.push(format!("spec_hash={}", self.spec_hash));
        for (i, e) in self.entries.iter().enumerate() {
            lines.push(format!("sample.{i}.image={}", e.image));
            lines.push(format!("sample.{i}.image.sha256={}", e.image_sha256));
            if let Some((label, sha)) = &e.label {
                lines.push(format!("sample.{i}.label={label}"));
                lines.push(format!("sample.{i}.label.sha256={sha}"));
            }
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MadanError::format("manifest", path, format!("line {}: missing '='", ln + 1)))?;
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(MadanError::format("manifest", path, format!("duplicate key {k}")));
            }
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| MadanError::format("manifest", path, format!("missing key {k}")))
        };
        fn num<T: std::str::FromStr>(v: &str, k: &str, path: &Path) -> Result<T> {
            v.parse()
                .map_err(|_| MadanError::format("manifest", path, format!("bad value for {k}: {v}")))
        }
        if get("format")? != FORMAT_TAG {
            return Err(MadanError::format("manifest", path, "unknown format tag"));
        }
        let n: usize = num(get("n")?, "n", path)?;
        let labeled: bool = num(get("labeled")?, "labeled", path)?;
        let palette = get("spec.class_palette")?
            .split(';')
            .map(|c| {
                let v: Vec<u8> = c
                    .split(',')
                    .map(|x| num(x, "spec.class_palette", path))
                    .collect::<Result<_>>()?;
                <[u8; 3]>::try_from(v.as_slice())
                    .map_err(|_| MadanError::format("manifest", path, "palette entry needs 3 channels"))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = DomainSpec {
            domain_id: get("spec.domain_id")?.clone(),
            class_palette: palette,
            noise_sigma: num(get("spec.noise_sigma")?, "spec.noise_sigma", path)?,
            blur_radius: num(get("spec.blur_radius")?, "spec.blur_radius", path)?,
            brightness_shift: num(get("spec.brightness_shift")?, "spec.brightness_shift", path)?,
            contrast_scale: num(get("spec.contrast_scale")?, "spec.contrast_scale", path)?,
            texture_freq: num(get("spec.texture_freq")?, "spec.texture_freq", path)?,
            rng_seed: num(get("spec.rng_seed")?, "spec.rng_seed", path)?,
        };
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let image = get(&format!("sample.{i}.image"))?.clone();
            let image_sha256 = get(&format!("sample.{i}.image.sha256"))?.clone();
            let label = if labeled {
                Some((
                    get(&format!("sample.{i}.label"))?.clone(),
                    get(&format!("sample.{i}.label.sha256"))?.clone(),
                ))
            } else {
                None
            };
            entries.push(ManifestEntry {
                image,
                image_sha256,
                label,
            });
        }
        let expected_keys = 10 + 8 + entries.len() * if labeled { 4 } else { 2 };
        if kv.len() != expected_keys {
            return Err(MadanError::format(
                "manifest",
                path,
                format!("{} keys present, expected {expected_keys}", kv.len()),
            ));
        }
        Ok(Self {
            domain_id: get("domain_id")?.clone(),
            n,
            height: num(get("height")?, "height", path)?,
            width: num(get("width")?, "width", path)?,
            classes: num(get("classes")?, "classes", path)?,
            labeled,
            first_index: num(get("first_index")?, "first_index", path)?,
            rng: get("rng")?.clone(),
            spec,
            spec_hash: get("spec_hash")?.clone(),
            entries,
        })
    }
}

/// Renders `n` layouts of `spec` into `out_dir` and writes the manifest last.
/// Re-running with the same inputs rewrites identical bytes.
pub fn generate_dataset(spec: &DomainSpec, n: usize, out_dir: &Path, opts: GenerateOptions) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(MadanError::range("sample count", "n must be at least 1"));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| MadanError::io("create dataset dir", out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let seed = layout_seed(spec.rng_seed, opts.first_index + i as u64);
        let (img, label) = render_scene(spec, seed, opts.height, opts.width)?;
        let image_name = format!("{i:05}.ppm");
        let ppm = encode_ppm(&img);
        write_atomic(&out_dir.join(&image_name), &ppm)?;
        let label = if opts.labeled {
            let name = format!("{i:05}.pgm");
            let pgm = encode_pgm(&label);
            write_atomic(&out_dir.join(&name), &pgm)?;
            Some((name, sha256_hex(&pgm)))
        } else {
            None
        };
        entries.push(ManifestEntry {
            image: image_name,
            image_sha256: sha256_hex(&ppm),
            label,
        });
    }
    let manifest = DatasetManifest {
        domain_id: spec.domain_id.clone(),
        n,
        height: opts.height,
        width: opts.width,
        classes: NUM_CLASSES,
        labeled: opts.labeled,
        first_index: opts.first_index,
        rng: RNG_DESCRIPTION.to_string(),
        spec: spec.clone(),
        spec_hash: spec.fingerprint(),
        entries,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MadanError::io("read", path, e))
}

/// Loads and verifies a dataset directory. Unlabeled datasets yield samples
/// whose label is `None`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = String::from_utf8(read(&mpath)?).map_err(|_| MadanError::format("manifest", &mpath, "not UTF-8"))?;
    let manifest = DatasetManifest::parse(&text, &mpath)?;
    if manifest.spec.fingerprint() != manifest.spec_hash {
        return Err(MadanError::integrity(
            &mpath,
            "spec fingerprint does not match spec fields",
        ));
    }
    manifest.spec.validate()?;
    let mut samples = Vec::with_capacity(manifest.n);
    for (i, e) in manifest.entries.iter().enumerate() {
        let ipath = dir.join(&e.image);
        let bytes = read(&ipath)?;
        if sha256_hex(&bytes) != e.image_sha256 {
            return Err(MadanError::integrity(
                &ipath,
                format!("checksum mismatch for sample {i}"),
            ));
        }
        let image = decode_ppm(&bytes, &ipath)?;
        if image.height != manifest.height || image.width != manifest.width {
            return Err(MadanError::integrity(&ipath, format!("sample {i} has wrong size")));
        }
        let label = match &e.label {
            Some((name, sha)) => {
                let lpath = dir.join(name);
                let bytes = read(&lpath)?;
                if sha256_hex(&bytes) != *sha {
                    return Err(MadanError::integrity(
                        &lpath,
                        format!("checksum mismatch for sample {i}"),
                    ));
                }
                let label = decode_pgm(&bytes, &lpath)?;
                if label.height != manifest.height
                    || label.width != manifest.width
                    || label.data.iter().any(|&c| c as usize >= manifest.classes)
                {
                    return Err(MadanError::integrity(&lpath, format!("sample {i} label invalid")));
                }
                Some(label)
            }
            None => None,
        };
        samples.push(Sample { image, label });
    }
    Ok(Dataset { manifest, samples })
}

/// Style and size knobs for a full multi-source experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub source_shifts: Vec<f64>,
    pub target_shift: f64,
    pub n_per_domain: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source_shifts: vec![0.4, 0.8],
            target_shift: 0.6,
            n_per_domain: 200,
            n_test: 50,
            height: 64,
            width: 64,
        }
    }
}

/// Directory names of a generated suite under one root.
#[derive(Clone, Debug)]
pub struct SuiteLayout {
    pub root: PathBuf,
}

impl SuiteLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn source(&self, i: usize) -> PathBuf {
        self.root.join(format!("source_{i}"))
    }
    pub fn source_test(&self, i: usize) -> PathBuf {
        self.root.join(format!("source_{i}_test"))
    }
    pub fn target(&self) -> PathBuf {
        self.root.join("target")
    }
    pub fn target_test(&self) -> PathBuf {
        self.root.join("target_test")
    }
}

/// Generates `M` labeled sources (plus held-out splits), the unlabeled
/// target training split and a labeled target evaluation split.
pub fn generate_suite(cfg: &SuiteConfig, root: &Path) -> Result<Vec<DatasetManifest>> {
    if cfg.source_shifts.is_empty() {
        return Err(MadanError::range("sources", "at least one source domain"));
    }
    let layout = SuiteLayout::new(root);
    let train = |labeled| GenerateOptions {
        height: cfg.height,
        width: cfg.width,
        labeled,
        first_index: 0,
    };
    let held_out = GenerateOptions {
        first_index: cfg.n_per_domain as u64,
        ..train(true)
    };
    let mut out = Vec::new();
    for (i, &shift) in cfg.source_shifts.iter().enumerate() {
        let spec = sample_domain_spec(&format!("source_{i}"), cfg.seed, shift)?;
        out.push(generate_dataset(
            &spec,
            cfg.n_per_domain,
            &layout.source(i),
            train(true),
        )?);
        out.push(generate_dataset(&spec, cfg.n_test, &layout.source_test(i), held_out)?);
    }
    let spec = sample_domain_spec("target", cfg.seed, cfg.target_shift)?;
    out.push(generate_dataset(
        &spec,
        cfg.n_per_domain,
        &layout.target(),
        train(false),
    )?);
    out.push(generate_dataset(&spec, cfg.n_test, &layout.target_test(), held_out)?);
    Ok(out)
}

/// Training inputs of a suite: labeled sources, unlabeled target and the
/// labeled target evaluation split.
pub struct LoadedSuite {
    pub sources: Vec<Dataset>,
    pub target: Dataset,
    pub target_test: Dataset,
}

pub fn load_suite(root: &Path, sources: usize) -> Result<LoadedSuite> {
    let layout = SuiteLayout::new(root);
    let sources = (0..sources)
        .map(|i| load_dataset(&layout.source(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSuite {
        sources,
        target: load_dataset(&layout.target())?,
        target_test: load_dataset(&layout.target_test())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_round_trip() {
        let img = RgbImage {
            height: 2,
            width: 3,
            data: (0..18).collect(),
        };
        let p = Path::new("x.ppm");
        assert_eq!(decode_ppm(&encode_ppm(&img), p).unwrap(), img);
        let lab = LabelMap {
            height: 2,
            width: 2,
            data: vec![0, 1, 2, 3],
        };
        assert_eq!(decode_pgm(&encode_pgm(&lab), p).unwrap(), lab);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let mut bytes = encode_ppm(&RgbImage {
            height: 2,
            width: 2,
            data: vec![1; 12],
        });
        bytes.pop();
        assert!(decode_ppm(&bytes, Path::new("t.ppm")).is_err());
        assert!(decode_pgm(b"P6\n1 1\n255\n\0", Path::new("t.pgm")).is_err());
    }

    #[test]
    fn zero_samples_rejected() {
        let spec = sample_domain_spec("a", 0, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&spec, 0, dir.path(), GenerateOptions::default()).is_err());
    }
}
