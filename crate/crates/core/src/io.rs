//! Little-endian binary formats for datasets and checkpoints.
//!
//! Dataset file:
//!
//! ```text
//! "MNH2DS1\0"                    8 bytes
//! version = 1                    u32
//! d                              u32
//! N per axis                     d x u32
//! sample count                   u32
//! dtype                          u8 (4 = f32, 8 = f64)
//! payload                        per sample: v then u, N^d scalars each
//! ```
//!
//! Checkpoint file:
//!
//! ```text
//! "MNH2CK1\0"                    8 bytes
//! version = 1                    u32
//! dtype                          u8
//! architecture                   u64 byte length, then UTF-8 key=value lines
//! epoch                          u64
//! layer count                    u64
//! per layer                      weights, then bias, each u64 byte length + scalars
//! optimizer flag                 u8 (0 = absent, 1 = present)
//! optimizer (if present)         lr, beta1, beta2, eps, schedule_decay, m_schedule (f64),
//!                                step (u64), then first and second moments per layer
//!                                as weight and bias blobs
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerParams};
use crate::model::{Architecture, Network, NetworkConfig, PlainCnnConfig, SharingMode};
use crate::tensor::{Padding, Real, Tensor};
use crate::train::{Dataset, Nadam, NadamConfig};

pub const DATASET_MAGIC: [u8; 8] = *b"MNH2DS1\0";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MNH2CK1\0";
pub const FORMAT_VERSION: u32 = 1;

/// Fields of a dataset file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub dim: usize,
    pub n: usize,
    pub count: usize,
    /// Bytes per scalar: 4 or 8.
    pub dtype: u8,
}

impl DatasetHeader {
    pub fn points(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn payload_bytes(&self) -> usize {
        self.count * 2 * self.points() * self.dtype as usize
    }
}

fn write_u32<W: Write>(w: &mut W, x: usize, what: &str) -> Result<()> {
    let x =
        u32::try_from(x).map_err(|_| Error::format(format!("{what} {x} does not fit in u32")))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn read_array<R: Read, const K: usize>(r: &mut R, what: &str) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf)
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format(format!("file ends inside {what}"))
    } else {
        Error::Io(e)
    }
}

fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    Ok(read_array::<R, 1>(r, what)?[0])
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    Ok(u32::from_le_bytes(read_array(r, what)?) as usize)
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r, what)?))
}

fn check_magic<R: Read>(r: &mut R, expected: &[u8; 8], kind: &str) -> Result<()> {
    let magic: [u8; 8] = read_array(r, "magic")?;
    if &magic != expected {
        return Err(Error::format(format!("bad {kind} magic {magic:?}")));
    }
    Ok(())
}

fn check_dtype(tag: u8) -> Result<u8> {
    match tag {
        4 | 8 => Ok(tag),
        other => Err(Error::format(format!(
            "unknown dtype tag {other} (expected 4 or 8)"
        ))),
    }
}

fn write_scalars<T: Real, W: Write>(w: &mut W, xs: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * T::BYTES as usize);
    for &x in xs {
        let x = x.to_f64_lossy();
        if T::BYTES == 4 {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads `count` scalars stored with `dtype` bytes each.
fn read_scalars<T: Real, R: Read>(
    r: &mut R,
    count: usize,
    dtype: u8,
    what: &str,
) -> Result<Vec<T>> {
    let width = dtype as usize;
    let mut buf = vec![0u8; count * width];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf
        .chunks_exact(width)
        .map(|c| {
            let x = if width == 4 {
                f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64
            } else {
                f64::from_le_bytes(c.try_into().expect("8-byte chunk"))
            };
            T::from_f64(x).unwrap_or_else(T::nan)
        })
        .collect())
}

fn write_blob<T: Real, W: Write>(w: &mut W, xs: &[T]) -> Result<()> {
    write_u64(w, (xs.len() * T::BYTES as usize) as u64)?;
    write_scalars(w, xs)
}

fn read_blob<T: Real, R: Read>(
    r: &mut R,
    dtype: u8,
    expected: usize,
    what: &str,
) -> Result<Vec<T>> {
    let bytes = read_u64(r, what)? as usize;
    if bytes != expected * dtype as usize {
        return Err(Error::format(format!(
            "{what}: blob holds {bytes} bytes, layer needs {expected} scalars of {dtype} bytes"
        )));
    }
    read_scalars(r, expected, dtype, what)
}

/// Writes a dataset in the precision of `T`.
pub fn write_dataset<T: Real, W: Write>(w: &mut W, data: &Dataset<T>) -> Result<()> {
    w.write_all(&DATASET_MAGIC)?;
    write_u32(w, FORMAT_VERSION as usize, "version")?;
    write_u32(w, data.dim, "dimension")?;
    for _ in 0..data.dim {
        write_u32(w, data.n, "grid size")?;
    }
    write_u32(w, data.len(), "sample count")?;
    w.write_all(&[T::BYTES])?;
    for (v, u) in data.inputs.iter().zip(&data.targets) {
        write_scalars(w, v.data())?;
        write_scalars(w, u.data())?;
    }
    Ok(())
}

pub fn read_dataset_header<R: Read>(r: &mut R) -> Result<DatasetHeader> {
    check_magic(r, &DATASET_MAGIC, "dataset")?;
    let version = read_u32(r, "version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let dim = read_u32(r, "dimension")?;
    if !(1..=2).contains(&dim) {
        return Err(Error::format(format!("unsupported dimension {dim}")));
    }
    let mut sizes = Vec::with_capacity(dim);
    for _ in 0..dim {
        sizes.push(read_u32(r, "grid size")?);
    }
    if sizes.iter().any(|&s| s != sizes[0]) || sizes[0] == 0 {
        return Err(Error::format(format!(
            "grid sizes {sizes:?} must be equal and positive"
        )));
    }
    let count = read_u32(r, "sample count")?;
    let dtype = check_dtype(read_u8(r, "dtype")?)?;
    Ok(DatasetHeader {
        version,
        dim,
        n: sizes[0],
        count,
        dtype,
    })
}

/// Reads a dataset of either precision into `T`, rejecting trailing bytes.
pub fn read_dataset<T: Real, R: Read>(r: &mut R) -> Result<(DatasetHeader, Dataset<T>)> {
    let header = read_dataset_header(r)?;
    let points = header.points();
    let shape = if header.dim == 1 {
        vec![header.n]
    } else {
        vec![header.n, header.n]
    };
    let mut inputs = Vec::with_capacity(header.count);
    let mut targets = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let what = format!("sample {i}");
        inputs.push(Tensor::new(
            shape.clone(),
            read_scalars(r, points, header.dtype, &what)?,
        )?);
        targets.push(Tensor::new(
            shape.clone(),
            read_scalars(r, points, header.dtype, &what)?,
        )?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after the last sample"));
    }
    let data = Dataset::new(header.dim, header.n, inputs, targets)?;
    Ok((header, data))
}

pub fn save_dataset<T: Real>(path: impl AsRef<Path>, data: &Dataset<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset<T: Real>(path: impl AsRef<Path>) -> Result<(DatasetHeader, Dataset<T>)> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Serializes an architecture as `key=value` lines.
pub fn architecture_to_text(arch: &Architecture) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    match arch {
        Architecture::Multiscale(c) => {
            put("kind", "mnn".into());
            put("dim", c.dim.to_string());
            put("n", c.n.to_string());
            put("levels", c.levels.to_string());
            put("leaf_size", c.leaf_size.to_string());
            put("rank", c.rank.to_string());
            put("k_layers", c.k_layers.to_string());
            put("sharing", c.sharing.to_string());
            put("padding", c.padding.to_string());
            put("adjacent_band", c.adjacent_band.to_string());
            put("coarse_band", c.coarse_band.to_string());
            put("band", c.band.to_string());
            put("activation", c.activation.to_string());
            put("transfer_activation", c.transfer_activation.to_string());
            put("init_std", c.init_std.to_string());
            put("bias", c.bias.to_string());
        }
        Architecture::PlainCnn(c) => {
            put("kind", "plain_cnn".into());
            put("dim", c.dim.to_string());
            put("n", c.n.to_string());
            put("hidden_layers", c.hidden_layers.to_string());
            put("channels", c.channels.to_string());
            put("window", c.window.to_string());
            put("activation", c.activation.to_string());
            put("init_std", c.init_std.to_string());
            put("bias", c.bias.to_string());
        }
    }
    s
}

/// Parses the output of [`architecture_to_text`]. Every key must be present
/// exactly once and no others may appear.
pub fn architecture_from_text(text: &str) -> Result<Architecture> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("architecture line without '=': {line}")))?;
        if map
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::format(format!("duplicate architecture key {k}")));
        }
    }
    let mut take = |k: &str| -> Result<String> {
        map.remove(k)
            .ok_or_else(|| Error::format(format!("architecture is missing key {k}")))
    };
    fn parse<V: std::str::FromStr>(k: &str, v: String) -> Result<V> {
        v.parse()
            .map_err(|_| Error::format(format!("bad value '{v}' for architecture key {k}")))
    }
    let kind = take("kind")?;
    let arch = match kind.as_str() {
        "mnn" => Architecture::Multiscale(NetworkConfig {
            dim: parse("dim", take("dim")?)?,
            n: parse("n", take("n")?)?,
            levels: parse("levels", take("levels")?)?,
            leaf_size: parse("leaf_size", take("leaf_size")?)?,
            rank: parse("rank", take("rank")?)?,
            k_layers: parse("k_layers", take("k_layers")?)?,
            sharing: parse::<SharingMode>("sharing", take("sharing")?)?,
            padding: parse::<Padding>("padding", take("padding")?)?,
            adjacent_band: parse("adjacent_band", take("adjacent_band")?)?,
            coarse_band: parse("coarse_band", take("coarse_band")?)?,
            band: parse("band", take("band")?)?,
            activation: parse::<Activation>("activation", take("activation")?)?,
            transfer_activation: parse::<Activation>(
                "transfer_activation",
                take("transfer_activation")?,
            )?,
            init_std: parse("init_std", take("init_std")?)?,
            bias: parse("bias", take("bias")?)?,
        }),
        "plain_cnn" => Architecture::PlainCnn(PlainCnnConfig {
            dim: parse("dim", take("dim")?)?,
            n: parse("n", take("n")?)?,
            hidden_layers: parse("hidden_layers", take("hidden_layers")?)?,
            channels: parse("channels", take("channels")?)?,
            window: parse("window", take("window")?)?,
            activation: parse::<Activation>("activation", take("activation")?)?,
            init_std: parse("init_std", take("init_std")?)?,
            bias: parse("bias", take("bias")?)?,
        }),
        other => {
            return Err(Error::format(format!(
                "unknown architecture kind '{other}'"
            )))
        }
    };
    if let Some(k) = map.keys().next() {
        return Err(Error::format(format!("unknown architecture key {k}")));
    }
    Ok(arch)
}

/// A trained network together with the state needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub net: Network<T>,
    pub optimizer: Option<Nadam<T>>,
    /// Completed epochs.
    pub epoch: usize,
}

fn write_params<T: Real, W: Write>(w: &mut W, params: &[&LayerParams<T>]) -> Result<()> {
    for p in params {
        write_blob(w, &p.weights)?;
        write_blob(w, &p.bias)?;
    }
    Ok(())
}

fn read_params<T: Real, R: Read>(
    r: &mut R,
    dtype: u8,
    shapes: &[(usize, usize)],
    what: &str,
) -> Result<Vec<LayerParams<T>>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(nw, nb))| {
            Ok(LayerParams {
                weights: read_blob(r, dtype, nw, &format!("{what} layer {i} weights"))?,
                bias: read_blob(r, dtype, nb, &format!("{what} layer {i} bias"))?,
            })
        })
        .collect()
}

pub fn write_checkpoint<T: Real, W: Write>(w: &mut W, ck: &Checkpoint<T>) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(w, FORMAT_VERSION as usize, "version")?;
    w.write_all(&[T::BYTES])?;
    let text = architecture_to_text(ck.net.architecture());
    write_u64(w, text.len() as u64)?;
    w.write_all(text.as_bytes())?;
    write_u64(w, ck.epoch as u64)?;
    let params = ck.net.params();
    write_u64(w, params.len() as u64)?;
    write_params(w, &params)?;
    match &ck.optimizer {
        None => w.write_all(&[0])?,
        Some(opt) => {
            w.write_all(&[1])?;
            let c = &opt.config;
            for x in [
                c.lr,
                c.beta1,
                c.beta2,
                c.eps,
                c.schedule_decay,
                opt.m_schedule,
            ] {
                w.write_all(&x.to_le_bytes())?;
            }
            write_u64(w, opt.step)?;
            write_params(w, &opt.m.iter().collect::<Vec<_>>())?;
            write_params(w, &opt.v.iter().collect::<Vec<_>>())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint stored in the precision of `T`.
pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<Checkpoint<T>> {
    check_magic(r, &CHECKPOINT_MAGIC, "checkpoint")?;
    let version = read_u32(r, "version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = check_dtype(read_u8(r, "dtype")?)?;
    if dtype != T::BYTES {
        return Err(Error::format(format!(
            "checkpoint stores {dtype}-byte scalars, caller expects {}",
            T::BYTES
        )));
    }
    let len = read_u64(r, "architecture length")? as usize;
    if len > 1 << 20 {
        return Err(Error::format(format!(
            "architecture block of {len} bytes is implausible"
        )));
    }
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|e| truncated(e, "architecture"))?;
    let text = String::from_utf8(text).map_err(|_| Error::format("architecture is not UTF-8"))?;
    let arch = architecture_from_text(&text)?;
    let epoch = read_u64(r, "epoch")? as usize;
    let template = Network::<T>::zeros(arch.clone())?;
    let shapes: Vec<(usize, usize)> = template
        .params()
        .iter()
        .map(|p| (p.weights.len(), p.bias.len()))
        .collect();
    let layers = read_u64(r, "layer count")? as usize;
    if layers != shapes.len() {
        return Err(Error::format(format!(
            "checkpoint has {layers} layers, architecture has {}",
            shapes.len()
        )));
    }
    let params = read_params(r, dtype, &shapes, "network")?;
    let net = Network::from_params(arch, params)?;
    let optimizer = match read_u8(r, "optimizer flag")? {
        0 => None,
        1 => {
            let mut f = [0.0; 6];
            for (i, x) in f.iter_mut().enumerate() {
                *x = read_f64(r, &format!("optimizer field {i}"))?;
            }
            let step = read_u64(r, "optimizer step")?;
            let m = read_params(r, dtype, &shapes, "first moment")?;
            let v = read_params(r, dtype, &shapes, "second moment")?;
            Some(Nadam {
                config: NadamConfig {
                    lr: f[0],
                    beta1: f[1],
                    beta2: f[2],
                    eps: f[3],
                    schedule_decay: f[4],
                },
                step,
                m_schedule: f[5],
                m,
                v,
            })
        }
        other => return Err(Error::format(format!("bad optimizer flag {other}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        net,
        optimizer,
        epoch,
    })
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Reads only the scalar width stored in a checkpoint file.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<u8> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, &CHECKPOINT_MAGIC, "checkpoint")?;
    read_u32(&mut r, "version")?;
    check_dtype(read_u8(&mut r, "dtype")?)
}
