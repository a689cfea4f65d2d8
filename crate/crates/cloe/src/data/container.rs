//! Bit-exact on-disk tensor container plus dataset and checkpoint layout.
//!
//! Container layout, little-endian:
//!
//! ```text
//! magic  "CLOE"      4 bytes
//! version u16 = 1    2
//! dtype   u16        2   (0 = f32, 1 = f64)
//! rank    u16        2
//! pad     u16 = 0    2
//! dims    8 x u32    32  (unused dims = 1)
//! payload            numel * element size, raw little-endian
//! ```
//!
//! Metadata lives in a plain-text sidecar of `key = value` lines.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{CloeError, Result};
use crate::real::Real;
use crate::tensor::{LabelVolume, Tensor};
use crate::param::ParamSet;

use super::MultimodalSample;

pub const MAGIC: &[u8; 4] = b"CLOE";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 44;
const MAX_RANK: usize = 8;

fn dtype_bytes(code: u16) -> Result<usize> {
    match code {
        0 => Ok(4),
        1 => Ok(8),
        other => Err(CloeError::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if !t.all_finite() {
        return Err(CloeError::Numerical(format!(
            "refusing to write non-finite tensor to {}",
            path.display()
        )));
    }
    if t.shape().len() > MAX_RANK {
        return Err(CloeError::Format(format!(
            "rank {} exceeds container maximum {MAX_RANK}",
            t.shape().len()
        )));
    }
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(CloeError::Format(format!("dimension {d} overflows u32")));
        }
    }
    let mut buf = Vec::with_capacity(HEADER_BYTES + t.numel() * T::BYTE_WIDTH);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for i in 0..MAX_RANK {
        let d = t.shape().get(i).copied().unwrap_or(1) as u32;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let bits = v.to_bits64();
        buf.extend_from_slice(&bits.to_le_bytes()[..T::BYTE_WIDTH]);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; HEADER_BYTES];
    file.read_exact(&mut header).map_err(|_| {
        CloeError::Format(format!("{}: truncated header", path.display()))
    })?;
    if &header[0..4] != MAGIC {
        return Err(CloeError::Format(format!("{}: bad magic", path.display())));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(CloeError::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let dtype = u16::from_le_bytes([header[6], header[7]]);
    let width = dtype_bytes(dtype)?;
    if dtype != T::DTYPE_CODE {
        return Err(CloeError::Format(format!(
            "{}: dtype code {dtype} does not match requested element type",
            path.display()
        )));
    }
    let rank = u16::from_le_bytes([header[8], header[9]]) as usize;
    if rank > MAX_RANK {
        return Err(CloeError::Format(format!("{}: rank {rank} too large", path.display())));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 12 + 4 * i;
        shape.push(u32::from_le_bytes([
            header[off],
            header[off + 1],
            header[off + 2],
            header[off + 3],
        ]) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * width];
    file.read_exact(&mut payload).map_err(|_| {
        CloeError::Format(format!("{}: truncated payload", path.display()))
    })?;
    let mut extra = [0u8; 1];
    if file.read(&mut extra)? != 0 {
        return Err(CloeError::Format(format!("{}: trailing bytes", path.display())));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(width) {
        let mut bits = [0u8; 8];
        bits[..width].copy_from_slice(chunk);
        data.push(T::from_bits64(u64::from_le_bytes(bits)));
    }
    Tensor::new(&shape, data)
}

// ── key = value sidecars ────────────────────────────────────────────────

pub fn write_sidecar(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CloeError::Format(format!("{}: bad sidecar line '{line}'", path.display()))
        })?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}

fn sidecar_get<'a>(entries: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    entries
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CloeError::Format(format!("{}: missing key '{key}'", path.display())))
}

// ── dataset directory layout ────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub count: usize,
    pub modalities: usize,
    pub classes: usize,
    pub dims: [usize; 3],
}

/// Writes `dataset.meta`, then per sample `sNNNN.mK.cloe`, `sNNNN.labels.cloe`
/// and an `sNNNN.meta` sidecar.
pub fn save_dataset(dir: &Path, samples: &[MultimodalSample<f32>], classes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(CloeError::Config("refusing to write an empty dataset".into()));
    }
    fs::create_dir_all(dir)?;
    let dims = samples[0].dims();
    let meta = DatasetMeta {
        count: samples.len(),
        modalities: samples[0].modalities(),
        classes,
        dims,
    };
    write_sidecar(
        &dir.join("dataset.meta"),
        &[
            ("count", meta.count.to_string()),
            ("modalities", meta.modalities.to_string()),
            ("classes", meta.classes.to_string()),
            ("dims", format!("{},{},{}", dims[0], dims[1], dims[2])),
        ],
    )?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("s{i:04}");
        for (m, vol) in s.volumes().iter().enumerate() {
            write_tensor(&dir.join(format!("{stem}.m{m}.cloe")), vol)?;
        }
        let [d, h, w] = s.dims();
        let lab_f32 = Tensor::<f32>::new(
            &[d, h, w],
            s.labels().data().iter().map(|&l| l as f32).collect(),
        )?;
        write_tensor(&dir.join(format!("{stem}.labels.cloe")), &lab_f32)?;
        write_sidecar(
            &dir.join(format!("{stem}.meta")),
            &[
                ("id", s.id.clone()),
                ("modalities", s.modalities().to_string()),
                ("classes", classes.to_string()),
                ("labels", "true".to_string()),
            ],
        )?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<MultimodalSample<f32>>, DatasetMeta)> {
    let meta_path = dir.join("dataset.meta");
    let entries = read_sidecar(&meta_path)?;
    let parse = |key: &str| -> Result<usize> {
        sidecar_get(&entries, key, &meta_path)?
            .parse::<usize>()
            .map_err(|e| CloeError::Format(format!("dataset.meta: {key}: {e}")))
    };
    let count = parse("count")?;
    let modalities = parse("modalities")?;
    let classes = parse("classes")?;
    let dims_raw = sidecar_get(&entries, "dims", &meta_path)?;
    let dims_vec: Vec<usize> = dims_raw
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CloeError::Format(format!("dataset.meta: dims: {e}")))?;
    if dims_vec.len() != 3 {
        return Err(CloeError::Format("dataset.meta: dims must have 3 entries".into()));
    }
    let dims = [dims_vec[0], dims_vec[1], dims_vec[2]];

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let stem = format!("s{i:04}");
        let sc_path = dir.join(format!("{stem}.meta"));
        let sc = read_sidecar(&sc_path)?;
        let id = sidecar_get(&sc, "id", &sc_path)?.to_string();
        let mut volumes = Vec::with_capacity(modalities);
        for m in 0..modalities {
            volumes.push(read_tensor::<f32>(&dir.join(format!("{stem}.m{m}.cloe")))?);
        }
        let lab_f32 = read_tensor::<f32>(&dir.join(format!("{stem}.labels.cloe")))?;
        let lab_shape = lab_f32.shape().to_vec();
        if lab_shape.len() != 3 {
            return Err(CloeError::Format(format!("{stem}: labels must be rank 3")));
        }
        let data: Vec<u8> = lab_f32
            .data()
            .iter()
            .map(|&v| {
                let l = v as u8;
                if (l as f32 - v).abs() > 0.0 || (l as usize) >= classes {
                    Err(CloeError::Format(format!("{stem}: label value {v} invalid")))
                } else {
                    Ok(l)
                }
            })
            .collect::<Result<_>>()?;
        let labels = LabelVolume::new([lab_shape[0], lab_shape[1], lab_shape[2]], data)?;
        samples.push(MultimodalSample::new(id, volumes, labels)?);
    }
    Ok((samples, DatasetMeta { count, modalities, classes, dims }))
}

// ── parameter checkpoints ───────────────────────────────────────────────

/// One container file per parameter plus a `manifest.tsv` of
/// `name<TAB>file<TAB>dims` rows.
pub fn save_params<T: Real>(dir: &Path, params: &ParamSet<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (_, e) in params.iter() {
        let file = format!("{}.cloe", e.name.replace('.', "_"));
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", e.name, file, dims.join(",")));
        let t = Tensor::new(&e.shape, e.data.clone())?;
        write_tensor(&dir.join(&file), &t)?;
    }
    let mut f = fs::File::create(dir.join("manifest.tsv"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint into an already-built parameter set; every manifest
/// entry must match an existing parameter of the same shape.
pub fn load_params_into<T: Real>(dir: &Path, params: &mut ParamSet<T>) -> Result<()> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)?;
    let mut loaded = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (name, file) = match (parts.next(), parts.next()) {
            (Some(n), Some(f)) => (n, f),
            _ => {
                return Err(CloeError::Format(format!(
                    "{}: malformed row '{line}'",
                    manifest_path.display()
                )))
            }
        };
        let t = read_tensor::<T>(&dir.join(file))?;
        params.set_data(name, t)?;
        loaded += 1;
    }
    if loaded != params.len() {
        return Err(CloeError::Format(format!(
            "checkpoint provides {loaded} parameters, model has {}",
            params.len()
        )));
    }
    Ok(())
}

pub fn checkpoint_dir(base: &Path, tag: &str) -> PathBuf {
    base.join(format!("checkpoint-{tag}"))
}
