//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "NESTNET\0"
//! 8       2     format version (u16, currently 1)
//! 10      1     kind: 0 = full nested model, 1 = sliced model
//! 11      1     scalar width in bytes: 4 (f32) or 8 (f64)
//! 12      4     descriptor length D (u32)
//! 16      D     descriptor, UTF-8 TOML (architecture, group boundaries,
//!               frozen flag, slice id for sliced models)
//! 16+D    4     tensor count T (u32)
//!         ...   T tensors, each:
//!                 u16 name length, name bytes (UTF-8)
//!                 u8  rank R, then R × u32 dims
//!                 product(dims) scalars, little-endian IEEE 754
//! end-4   4     CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Full models store their trainable tensors in canonical order followed by
//! the normalization running statistics. Connection masks are not stored:
//! they are a function of the architecture and group boundaries and are
//! rebuilt on load. Sliced models store dense packed convolution weights as
//! rank-1 tensors; the per-row input counts are re-derived from the group
//! boundaries.
//!
//! Every save also writes a TOML sidecar (`<path>.toml`) holding the
//! descriptor in readable form. The sidecar is informational; loading reads
//! only the container.

use std::path::{Path, PathBuf};

use nestnet_core::nested::ConvBn;
use nestnet_core::numerics::{BatchNorm, CumulativeLinear, PackedConv};
use nestnet_core::slicing::{SlicedBlock, SlicedConvBn};
use nestnet_core::{GroupSpec, NestedModel, Rng, Scalar, SliceId, SlicedModel, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ArchSpec;

pub const MAGIC: [u8; 8] = *b"NESTNET\0";
pub const VERSION: u16 = 1;
const HEADER: usize = 16;
const MIN_LEN: usize = HEADER + 4 + 4;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model container (bad magic bytes)")]
    BadMagic,
    #[error("container truncated: need at least {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported container version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x} (file corrupted or truncated)")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("container holds an invalid model: {0}")]
    Model(#[from] nestnet_core::Error),
}

type Result<T> = std::result::Result<T, ContainerError>;

fn malformed<T>(msg: impl Into<String>) -> Result<T> {
    Err(ContainerError::Malformed(msg.into()))
}

/// Scalars that can be written to and read from the payload.
pub trait Payload: Scalar {
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Payload for f32 {
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Payload for f64 {
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Full,
    Sliced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    frozen: bool,
    /// `[d, w]` for sliced models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice: Option<[usize; 2]>,
    group_boundaries: Vec<Vec<usize>>,
    arch: ArchSpec,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u16,
    kind: Kind,
    dtype: &'static str,
    #[serde(flatten)]
    descriptor: &'a Descriptor,
}

/// A decoded container.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Full32(NestedModel<f32>),
    Full64(NestedModel<f64>),
    Sliced32(SlicedModel<f32>),
    Sliced64(SlicedModel<f64>),
}

impl Loaded {
    pub fn kind(&self) -> Kind {
        match self {
            Loaded::Full32(_) | Loaded::Full64(_) => Kind::Full,
            Loaded::Sliced32(_) | Loaded::Sliced64(_) => Kind::Sliced,
        }
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            Loaded::Full32(_) | Loaded::Sliced32(_) => "f32",
            Loaded::Full64(_) | Loaded::Sliced64(_) => "f64",
        }
    }

    pub fn into_full32(self) -> Option<NestedModel<f32>> {
        match self {
            Loaded::Full32(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_full64(self) -> Option<NestedModel<f64>> {
        match self {
            Loaded::Full64(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_sliced32(self) -> Option<SlicedModel<f32>> {
        match self {
            Loaded::Sliced32(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_sliced64(self) -> Option<SlicedModel<f64>> {
        match self {
            Loaded::Sliced64(m) => Some(m),
            _ => None,
        }
    }
}

struct Entry<'a, S> {
    name: String,
    dims: Vec<usize>,
    data: &'a [S],
}

fn entry<'a, S>(name: impl Into<String>, dims: &[usize], data: &'a [S]) -> Entry<'a, S> {
    Entry {
        name: name.into(),
        dims: dims.to_vec(),
        data,
    }
}

/// Models that can be written into a container.
pub trait Encode {
    fn encode(&self) -> Vec<u8>;
    fn sidecar(&self) -> String;
}

impl<S: Payload> Encode for NestedModel<S> {
    fn encode(&self) -> Vec<u8> {
        let d = full_descriptor(self);
        write_container::<S>(Kind::Full, &d, &full_entries(self))
    }

    fn sidecar(&self) -> String {
        sidecar_text::<S>(Kind::Full, &full_descriptor(self))
    }
}

impl<S: Payload> Encode for SlicedModel<S> {
    fn encode(&self) -> Vec<u8> {
        let d = sliced_descriptor(self);
        write_container::<S>(Kind::Sliced, &d, &sliced_entries(self))
    }

    fn sidecar(&self) -> String {
        sidecar_text::<S>(Kind::Sliced, &sliced_descriptor(self))
    }
}

/// Writes the container to `path` and the descriptor sidecar next to it.
pub fn save<M: Encode>(model: &M, path: &Path) -> Result<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ContainerError::Io { path: p, source }
    };
    std::fs::write(path, model.encode()).map_err(io(path))?;
    let side = sidecar_path(path);
    std::fs::write(&side, model.sidecar()).map_err(io(&side))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".toml");
    PathBuf::from(name)
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

fn full_descriptor<S: Scalar>(m: &NestedModel<S>) -> Descriptor {
    Descriptor {
        frozen: m.is_frozen(),
        slice: None,
        group_boundaries: m.group_spec().all_bounds().to_vec(),
        arch: ArchSpec::from(m.arch()),
    }
}

fn sliced_descriptor<S: Scalar>(m: &SlicedModel<S>) -> Descriptor {
    let id = m.id();
    Descriptor {
        frozen: true,
        slice: Some([id.d, id.w]),
        group_boundaries: m.group_spec().all_bounds().to_vec(),
        arch: ArchSpec::from(m.arch()),
    }
}

fn sidecar_text<S: Scalar>(kind: Kind, d: &Descriptor) -> String {
    let side = Sidecar {
        format_version: VERSION,
        kind,
        dtype: S::NAME,
        descriptor: d,
    };
    toml::to_string(&side).expect("descriptor serializes")
}

fn full_entries<S: Scalar>(m: &NestedModel<S>) -> Vec<Entry<'_, S>> {
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    let mut conv_bn = |cb: &ConvBn<S>| {
        shapes.push(cb.layer.kernel().weights().shape().to_vec());
        shapes.push(vec![cb.bn.channels()]);
        shapes.push(vec![cb.bn.channels()]);
    };
    conv_bn(m.stem());
    for b in m.blocks() {
        conv_bn(&b.conv1);
        conv_bn(&b.conv2);
        if let Some(s) = &b.shortcut {
            conv_bn(s);
        }
    }
    for h in m.heads() {
        shapes.push(h.weight.shape().to_vec());
        shapes.push(h.bias.shape().to_vec());
    }
    let mut out: Vec<Entry<'_, S>> = m
        .params()
        .into_iter()
        .zip(shapes)
        .map(|((name, p), dims)| entry(name, &dims, p.values))
        .collect();
    out.extend(m.buffers().into_iter().map(|(name, v)| entry(name, &[v.len()], v)));
    out
}

fn sliced_entries<S: Scalar>(m: &SlicedModel<S>) -> Vec<Entry<'_, S>> {
    fn conv_bn<'a, S: Scalar>(out: &mut Vec<Entry<'a, S>>, prefix: &str, cb: &'a SlicedConvBn<S>) {
        let w = cb.conv.weights();
        out.push(entry(format!("{prefix}.conv.weight"), &[w.len()], w));
        let c = [cb.bn.channels()];
        out.push(entry(format!("{prefix}.bn.gamma"), &c, &cb.bn.gamma));
        out.push(entry(format!("{prefix}.bn.beta"), &c, &cb.bn.beta));
        out.push(entry(format!("{prefix}.bn.running_mean"), &c, &cb.bn.running_mean));
        out.push(entry(format!("{prefix}.bn.running_var"), &c, &cb.bn.running_var));
    }
    let mut out = Vec::new();
    conv_bn(&mut out, "stem", m.stem());
    for (i, b) in m.blocks().iter().enumerate() {
        conv_bn(&mut out, &format!("blocks.{i}.conv1"), &b.conv1);
        conv_bn(&mut out, &format!("blocks.{i}.conv2"), &b.conv2);
        if let Some(s) = &b.shortcut {
            conv_bn(&mut out, &format!("blocks.{i}.shortcut"), s);
        }
    }
    let h = m.head();
    out.push(entry("head.weight", h.weight.shape(), h.weight.data()));
    out.push(entry("head.bias", h.bias.shape(), h.bias.data()));
    out
}

fn write_container<S: Payload>(kind: Kind, d: &Descriptor, entries: &[Entry<'_, S>]) -> Vec<u8> {
    let desc = toml::to_string(d).expect("descriptor serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match kind {
        Kind::Full => 0,
        Kind::Sliced => 1,
    });
    out.push(S::BYTES as u8);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.data {
            v.put(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return malformed(format!("{what} runs past the end of the payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct RawTensor<S> {
    name: String,
    dims: Vec<usize>,
    data: Vec<S>,
}

/// Decodes a container held in memory. Nothing is returned unless the
/// whole file validates.
pub fn decode(bytes: &[u8]) -> Result<Loaded> {
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(ContainerError::Truncated {
                needed: MIN_LEN,
                available: bytes.len(),
            })
        } else {
            Err(ContainerError::BadMagic)
        };
    }
    if bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < MIN_LEN {
        return Err(ContainerError::Truncated {
            needed: MIN_LEN,
            available: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ContainerError::ChecksumMismatch { stored, computed });
    }
    let kind = match body[10] {
        0 => Kind::Full,
        1 => Kind::Sliced,
        k => return malformed(format!("unknown model kind {k}")),
    };
    let width = body[11];
    let mut cur = Cursor { bytes: body, pos: 12 };
    let dlen = cur.u32("descriptor length")? as usize;
    let desc = std::str::from_utf8(cur.take(dlen, "descriptor")?)
        .map_err(|_| ContainerError::Malformed("descriptor is not UTF-8".into()))?;
    let desc: Descriptor =
        toml::from_str(desc).map_err(|e| ContainerError::Malformed(format!("descriptor: {e}")))?;
    match (kind, width) {
        (Kind::Full, 4) => Ok(Loaded::Full32(decode_full(&desc, read_tensors(&mut cur)?)?)),
        (Kind::Full, 8) => Ok(Loaded::Full64(decode_full(&desc, read_tensors(&mut cur)?)?)),
        (Kind::Sliced, 4) => Ok(Loaded::Sliced32(decode_sliced(&desc, read_tensors(&mut cur)?)?)),
        (Kind::Sliced, 8) => Ok(Loaded::Sliced64(decode_sliced(&desc, read_tensors(&mut cur)?)?)),
        (_, w) => malformed(format!("unsupported scalar width {w}")),
    }
}

fn read_tensors<S: Payload>(cur: &mut Cursor<'_>) -> Result<Vec<RawTensor<S>>> {
    let count = cur.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = cur.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(nlen, "tensor name")?)
            .map_err(|_| ContainerError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(S::BYTES))
            .ok_or_else(|| ContainerError::Malformed(format!("tensor {name} is too large")))?;
        let raw = cur.take(n, &name)?;
        let data = raw.chunks_exact(S::BYTES).map(S::get).collect();
        out.push(RawTensor { name, dims, data });
    }
    if cur.pos != cur.bytes.len() {
        return malformed(format!("{} unexpected bytes after the last tensor", cur.bytes.len() - cur.pos));
    }
    Ok(out)
}

fn groups_and_arch(d: &Descriptor) -> Result<(nestnet_core::ArchDescriptor, GroupSpec)> {
    let arch = d.arch.to_descriptor().map_err(ContainerError::Malformed)?;
    let groups = GroupSpec::from_boundaries(d.group_boundaries.clone())?;
    Ok((arch, groups))
}

fn check_tensor<S>(t: &RawTensor<S>, name: &str, dims: &[usize]) -> Result<()> {
    if t.name != name {
        return malformed(format!("expected tensor {name}, found {}", t.name));
    }
    if t.dims != dims {
        return malformed(format!("tensor {name}: expected shape {dims:?}, found {:?}", t.dims));
    }
    Ok(())
}

fn decode_full<S: Payload>(d: &Descriptor, tensors: Vec<RawTensor<S>>) -> Result<NestedModel<S>> {
    if d.slice.is_some() {
        return malformed("full model descriptor carries a slice id");
    }
    let (arch, groups) = groups_and_arch(d)?;
    let mut model = NestedModel::<S>::build(&arch, &groups, &mut Rng::new(arch.seed))?;
    let expected: Vec<(String, Vec<usize>)> = full_entries(&model)
        .into_iter()
        .map(|e| (e.name, e.dims))
        .collect();
    if expected.len() != tensors.len() {
        return malformed(format!("expected {} tensors, found {}", expected.len(), tensors.len()));
    }
    for (t, (name, dims)) in tensors.iter().zip(&expected) {
        check_tensor(t, name, dims)?;
    }
    let n_params = model.params().len();
    for (slot, t) in model.params_mut().into_iter().zip(&tensors[..n_params]) {
        slot.copy_from_slice(&t.data);
    }
    for (slot, t) in model.buffers_mut().into_iter().zip(&tensors[n_params..]) {
        slot.copy_from_slice(&t.data);
    }
    if d.frozen {
        model.freeze();
    }
    Ok(model)
}

fn decode_sliced<S: Payload>(d: &Descriptor, tensors: Vec<RawTensor<S>>) -> Result<SlicedModel<S>> {
    let Some([dd, ww]) = d.slice else {
        return malformed("sliced model descriptor lacks a slice id");
    };
    let (arch, groups) = groups_and_arch(d)?;
    let sites = arch.site_positions();
    let id = SliceId::new(dd, ww, sites.len(), arch.groups)?;
    let mut it = tensors.into_iter();
    let mut next = |name: &str, dims: Option<&[usize]>| -> Result<Vec<S>> {
        let t = it
            .next()
            .ok_or_else(|| ContainerError::Malformed(format!("missing tensor {name}")))?;
        match dims {
            Some(dims) => check_tensor(&t, name, dims)?,
            None if t.name != name || t.dims.len() != 1 => {
                return malformed(format!("expected rank-1 tensor {name}, found {} {:?}", t.name, t.dims))
            }
            None => {}
        }
        Ok(t.data)
    };
    let k = arch.kernel;
    let mut conv_bn = |prefix: &str, in_bounds: &[usize], out_bounds: &[usize], k: usize, stride: usize| {
        let out = out_bounds[ww - 1];
        let row_in: Vec<usize> = (0..out)
            .map(|o| in_bounds[out_bounds.partition_point(|&b| b <= o)])
            .collect();
        let w = next(&format!("{prefix}.conv.weight"), None)?;
        let conv = PackedConv::from_parts(row_in, w, k, stride, k / 2)?;
        let c = [out];
        let bn = BatchNorm {
            gamma: next(&format!("{prefix}.bn.gamma"), Some(&c))?,
            beta: next(&format!("{prefix}.bn.beta"), Some(&c))?,
            running_mean: next(&format!("{prefix}.bn.running_mean"), Some(&c))?,
            running_var: next(&format!("{prefix}.bn.running_var"), Some(&c))?,
        };
        Ok::<_, ContainerError>(SlicedConvBn { conv, bn })
    };
    let image = vec![arch.input_channels; arch.groups];
    let stem = conv_bn("stem", &image, groups.bounds(0), k, 1)?;
    let mut blocks = Vec::new();
    let mut prev = 0;
    for (i, &stage) in arch.block_stages()[..sites[id.d - 1]].iter().enumerate() {
        let (inb, outb) = (groups.bounds(prev), groups.bounds(stage));
        let stride = if stage != prev { 2 } else { 1 };
        let conv1 = conv_bn(&format!("blocks.{i}.conv1"), inb, outb, k, stride)?;
        let conv2 = conv_bn(&format!("blocks.{i}.conv2"), outb, outb, k, 1)?;
        let shortcut = if stage != prev {
            Some(conv_bn(&format!("blocks.{i}.shortcut"), inb, outb, 1, stride)?)
        } else {
            None
        };
        blocks.push(SlicedBlock { conv1, conv2, shortcut });
        prev = stage;
    }
    drop(conv_bn);
    let f = groups.retained(arch.site_stage(sites[id.d - 1]), id.w);
    let n = arch.classes;
    let head = CumulativeLinear {
        weight: Tensor::from_vec(&[n, f], next("head.weight", Some(&[n, f]))?)?,
        bias: Tensor::from_vec(&[n], next("head.bias", Some(&[n]))?)?,
    };
    drop(next);
    if let Some(extra) = it.next() {
        return malformed(format!("unexpected tensor {}", extra.name));
    }
    Ok(SlicedModel::from_parts(id, arch, groups, stem, blocks, head)?)
}
