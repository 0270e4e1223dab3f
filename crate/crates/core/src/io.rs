//! Binary PPM images and checkpoint files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::{quadrant_map, DegradationSpec, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, PromptIr};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};

/// Quantizes `[0, 1]` values to bytes: clamp, then `round(v·255)` with
/// halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes a `[3, H, W]` tensor as binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        &[3, h, w] => (h, w),
        s => {
            return Err(Error::shape(
                "encode_ppm",
                format!("expected [3, H, W], got {s:?}"),
            ))
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + i]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Image {
            path: self.path.into(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                self.pos = start;
                self.err(format!("{what} out of range"))
            })
    }
}

/// Decodes binary PPM bytes; `path` only labels diagnostics.
pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<Tensor> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if !bytes.starts_with(b"P6") {
        return Err(cur.err("missing P6 magic number"));
    }
    cur.pos = 2;
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(cur.err(format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(cur.err(format!("maxval {maxval} unsupported (only 255)")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected a whitespace byte after maxval"));
    }
    cur.pos += 1;
    let need = 3 * h * w;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "truncated payload: {} of {need} pixel bytes present",
            payload.len()
        )));
    }
    let mut data = vec![0.0; need];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(payload[3 * i + c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn save_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Version written to and required in every manifest.
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// Model, optimizer state and step of a training run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PromptIr,
    pub adam: AdamState,
    pub step: u64,
    pub train_config: TrainConfig,
}

impl Checkpoint {
    /// A step-0 checkpoint with zeroed optimizer moments.
    pub fn initial(model: PromptIr, train_config: TrainConfig) -> Self {
        let adam = AdamState::new(model.params());
        Self {
            model,
            adam,
            step: 0,
            train_config,
        }
    }
}

/// One blob slice as listed in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
    /// FNV-1a 64 of the slice bytes, as 16 lowercase hex digits.
    pub checksum: String,
}

/// Data needed to continue the random streams; they are keyed by seed and
/// step, so nothing else is stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub adam_t: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// Names under which the optimizer moments of parameter `name` are stored.
fn moment_names(name: &str) -> [String; 2] {
    [format!("adam.m/{name}"), format!("adam.v/{name}")]
}

/// Offsets of consecutive little-endian f64 tensors of the given shapes.
pub fn offsets_from_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Vec<u64> {
    shapes
        .into_iter()
        .scan(0u64, |at, s| {
            let here = *at;
            *at += 8 * s.iter().product::<usize>() as u64;
            Some(here)
        })
        .collect()
}

/// Serializes a checkpoint into its manifest and blob bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<(Manifest, Vec<u8>)> {
    let store = ckpt.model.params();
    if ckpt.adam.m.len() != store.len() || ckpt.adam.v.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer state covers {} parameters, model has {}",
            ckpt.adam.m.len(),
            store.len()
        )));
    }
    let mut blob = Vec::with_capacity(8 * 3 * store.numel());
    let mut tensors = Vec::with_capacity(3 * store.len());
    let mut push = |name: String, shape: &[usize], values: &[f64]| {
        let offset = blob.len();
        blob.extend(values.iter().flat_map(|v| v.to_le_bytes()));
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: offset as u64,
            byte_length: (blob.len() - offset) as u64,
            checksum: format!("{:016x}", fnv1a64(&blob[offset..])),
        });
    };
    for (name, p) in store.iter() {
        push(name.to_string(), p.shape(), p.data());
    }
    for (i, (name, p)) in store.iter().enumerate() {
        let [m, v] = moment_names(name);
        push(m, p.shape(), &ckpt.adam.m[i]);
        push(v, p.shape(), &ckpt.adam.v[i]);
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model_config: ckpt.model.config().clone(),
        train_config: ckpt.train_config.clone(),
        step: ckpt.step,
        adam_t: ckpt.adam.t,
        rng: RngState {
            seed: ckpt.train_config.seed,
            step: ckpt.step,
        },
        tensors,
    };
    Ok((manifest, blob))
}

/// Rebuilds a checkpoint, verifying layout and checksums first.
pub fn decode_checkpoint(manifest: &Manifest, blob: &[u8]) -> Result<Checkpoint> {
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let mut expected_offset = 0u64;
    let mut slices = indexmap::IndexMap::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.byte_length != 8 * numel as u64 {
            return Err(Error::Checkpoint(format!(
                "entry `{}` at offset {} with {} bytes breaks the contiguous layout (expected offset {expected_offset}, {} bytes)",
                e.name,
                e.offset,
                e.byte_length,
                8 * numel
            )));
        }
        let end = e.offset + e.byte_length;
        let bytes = blob.get(e.offset as usize..end as usize).ok_or_else(|| {
            Error::Checkpoint(format!(
                "blob ends before `{}` ({} of {end} bytes)",
                e.name,
                blob.len()
            ))
        })?;
        if format!("{:016x}", fnv1a64(bytes)) != e.checksum {
            return Err(Error::Checksum(e.name.clone()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if slices
            .insert(e.name.as_str(), (e.shape.as_slice(), values))
            .is_some()
        {
            return Err(Error::Checkpoint(format!(
                "entry `{}` appears twice",
                e.name
            )));
        }
        expected_offset = end;
    }
    if blob.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest describes {expected_offset}",
            blob.len()
        )));
    }

    let mut model = PromptIr::new(manifest.model_config.clone(), manifest.train_config.seed)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let (stored, values) = slices
            .swap_remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
        if stored != shape {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` has shape {stored:?}, model expects {shape:?}"
            )));
        }
        Ok(values)
    };
    let n = model.params().len();
    let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (name, p) in model.params_mut().iter_mut() {
        let values = take(name, p.shape())?;
        p.data_mut().copy_from_slice(&values);
        let [mn, vn] = moment_names(name);
        m.push(take(&mn, p.shape())?);
        v.push(take(&vn, p.shape())?);
    }
    if let Some(extra) = slices.keys().next() {
        return Err(Error::Checkpoint(format!(
            "entry `{extra}` matches no model parameter"
        )));
    }
    Ok(Checkpoint {
        model,
        adam: AdamState {
            m,
            v,
            t: manifest.adam_t,
        },
        step: manifest.step,
        train_config: manifest.train_config.clone(),
    })
}

/// Writes `manifest.json` and `tensors.bin` into directory `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |e| Error::io(p, e)
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (manifest, blob) = encode_checkpoint(ckpt)?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(io_err(&blob_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&manifest, &blob)
}

/// Index of a generated dataset directory (`manifest.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub tasks: Vec<DegradationSpec>,
    pub samples: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub index: usize,
    pub task: String,
    pub kind: TaskKind,
    /// Paths relative to the dataset directory.
    pub clean: String,
    pub degraded: String,
    /// FNV-1a 64 of the image files, as hex.
    pub clean_checksum: String,
    pub degraded_checksum: String,
    /// σ of the top-left, top-right, bottom-left and bottom-right quadrants
    /// for spatially variant noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_quadrants: Option<[f64; 4]>,
}

/// Corner σ values of a `[H, W]` quadrant map, in TL, TR, BL, BR order.
pub fn sigma_quadrants(map: &Tensor) -> Option<[f64; 4]> {
    let &[h, w] = map.shape() else { return None };
    let d = map.data();
    Some([d[0], d[w - 1], d[(h - 1) * w], d[h * w - 1]])
}

/// Writes `clean/NNNNN.ppm`, `degraded/NNNNN.ppm` and `manifest.json`.
pub fn save_dataset(
    samples: &[Sample],
    tasks: &[DegradationSpec],
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in ["clean", "degraded"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let write = |sub: &str, img: &Tensor| -> Result<(String, String)> {
            let rel = format!("{sub}/{index:05}.ppm");
            let bytes = encode_ppm(img)?;
            let path = dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
            Ok((rel, format!("{:016x}", fnv1a64(&bytes))))
        };
        let (clean, clean_checksum) = write("clean", &s.clean)?;
        let (degraded, degraded_checksum) = write("degraded", &s.degraded)?;
        entries.push(DatasetEntry {
            index,
            task: s.task.clone(),
            kind: s.kind,
            clean,
            degraded,
            clean_checksum,
            degraded_checksum,
            sigma_quadrants: s.sigma_map.as_ref().and_then(sigma_quadrants),
        });
    }
    let manifest = DatasetManifest {
        seed,
        tasks: tasks.to_vec(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Reads a dataset written by [`save_dataset`]. Samples come back as
/// stored (quantized to 8 bits); σ maps are rebuilt from the quadrants.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Sample>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let degraded = load_image(dir.join(&e.degraded))?;
            let sigma_map = e
                .sigma_quadrants
                .map(|q| quadrant_map(degraded.shape()[1], degraded.shape()[2], q));
            Ok(Sample {
                clean: load_image(dir.join(&e.clean))?,
                degraded,
                task: e.task.clone(),
                kind: e.kind,
                sigma_map,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        let img = Tensor::full(&[3, 2, 2], 0.5);
        let back = decode_ppm(&encode_ppm(&img).unwrap(), "mem").unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn ppm_round_trip_of_quantized_values() {
        let mut r = crate::rng::stream(1, 0);
        let img = Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut r);
        let q: Vec<f64> = img
            .data()
            .iter()
            .map(|&v| f64::from(quantize(v)) / 255.0)
            .collect();
        let q = Tensor::new(&[3, 5, 7], q).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&q).unwrap(), "mem").unwrap(), q);
        for v in [0.0, 1.0] {
            let t = Tensor::full(&[3, 2, 3], v);
            assert_eq!(decode_ppm(&encode_ppm(&t).unwrap(), "mem").unwrap(), t);
        }
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let ok = b"P6\n# note\n1 1\n255\n\x00\x80\xff";
        assert_eq!(
            decode_ppm(ok, "mem").unwrap().data(),
            [0.0, 128.0 / 255.0, 1.0]
        );
        let offset = |b: &[u8]| match decode_ppm(b, "mem").unwrap_err() {
            Error::Image { offset, .. } => offset,
            e => panic!("{e}"),
        };
        assert_eq!(offset(b"P5\n1 1\n255\n\x00"), 0);
        assert_eq!(offset(b"P6\n1 x\n255\n"), 5);
        assert_eq!(offset(b"P6\n2 1\n255\n\x00\x00\x00"), 14);
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00", "mem").is_err());
    }

    fn tiny_checkpoint() -> Checkpoint {
        let model = PromptIr::new(ModelConfig::default(), 3).unwrap();
        let mut ckpt = Checkpoint::initial(model, TrainConfig::default());
        for (m, v) in ckpt.adam.m.iter_mut().zip(&mut ckpt.adam.v) {
            m.iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = i as f64 * 1e-3 - 0.1);
            v.iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = (i as f64).sqrt() * 1e-7);
        }
        ckpt.adam.t = 17;
        ckpt.step = 17;
        ckpt
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ckpt = tiny_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.adam, ckpt.adam);
        assert_eq!(back.train_config, ckpt.train_config);
        for ((na, a), (nb, b)) in ckpt.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
        let x = crate::degrade::procedural_image(13, 19, 5)
            .reshape(&[1, 3, 13, 19])
            .unwrap();
        let run = |m: &PromptIr| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let out = m.forward(&mut tape, v).unwrap();
            tape.value(out.restored).clone()
        };
        assert_eq!(run(&ckpt.model), run(&back.model));

        let again = tempfile::tempdir().unwrap();
        save_checkpoint(&back, again.path()).unwrap();
        for file in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(file)).unwrap(),
                std::fs::read(again.path().join(file)).unwrap()
            );
        }
    }

    #[test]
    fn offsets_are_prefix_sums_of_shapes() {
        let (manifest, blob) = encode_checkpoint(&tiny_checkpoint()).unwrap();
        let offsets = offsets_from_shapes(manifest.tensors.iter().map(|e| e.shape.as_slice()));
        let stored: Vec<u64> = manifest.tensors.iter().map(|e| e.offset).collect();
        assert_eq!(offsets, stored);
        let last = manifest.tensors.last().unwrap();
        assert_eq!(last.offset + last.byte_length, blob.len() as u64);
    }

    #[test]
    fn corruption_names_the_parameter() {
        let (manifest, mut blob) = encode_checkpoint(&tiny_checkpoint()).unwrap();
        let target = &manifest.tensors[5];
        blob[target.offset as usize + 3] ^= 0x40;
        match decode_checkpoint(&manifest, &blob).unwrap_err() {
            Error::Checksum(name) => assert_eq!(name, target.name),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn version_mismatch_refuses_to_load() {
        let (mut manifest, blob) = encode_checkpoint(&tiny_checkpoint()).unwrap();
        manifest.format_version = 2;
        let err = decode_checkpoint(&manifest, &blob).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }
}
