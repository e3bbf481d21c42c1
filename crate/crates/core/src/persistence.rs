//! Binary model files: the compressed posterior ("2GBN") and the dense
//! Stage-1 checkpoint ("2GBD"). All integers and floats are little-endian;
//! every file ends with a CRC32 of the preceding bytes.

use std::path::Path;

use crate::assignment::{CompressedPosterior, WeightAssignment};
use crate::error::{Error, Result};
use crate::geometry::Gaussian2;
use crate::gmm::{GaussianComponent, GmmModel};
use crate::linalg::Spd2;
use crate::model::{Layout, Network};

pub const COMPRESSED_MAGIC: &[u8; 4] = b"2GBN";
pub const DENSE_MAGIC: &[u8; 4] = b"2GBD";
pub const VERSION: u16 = 1;

/// Set when component ids are stored as u32.
const FLAG_WIDE_IDS: u16 = 1;

const TAG_SINGLE: u8 = 0;
const TAG_BLENDED: u8 = 1;
const TAG_OUTLIER: u8 = 2;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.bytes(&(v as f32).to_le_bytes());
    }
    fn layers(&mut self, layout: &Layout) {
        self.u32(layout.n_layers() as u32);
        for l in 0..layout.n_layers() {
            self.u32(layout.in_dim(l) as u32);
            self.u32(layout.out_dim(l) as u32);
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedFile {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.arr()?) as f64)
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::InconsistentInputs(format!("count {v} does not fit in memory")))
    }
    fn layers(&mut self) -> Result<Layout> {
        let n = self.u32()? as usize;
        let mut dims = Vec::with_capacity(n + 1);
        for l in 0..n {
            let i = self.u32()? as usize;
            let o = self.u32()? as usize;
            if l == 0 {
                dims.push(i);
            } else if dims[l] != i {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} takes {i} inputs, previous layer gives {}",
                    dims[l]
                )));
            }
            dims.push(o);
        }
        Layout::new(&dims)
    }
}

/// Checks magic, trailing CRC and version; returns a reader positioned after
/// the version and the flags word.
fn open<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Reader<'a>, u16)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: magic.to_vec(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile {
            offset: bytes.len(),
            needed: 12 - bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let flags = r.u16()?;
    Ok((r, flags))
}

fn trailing(r: &Reader<'_>) -> Result<()> {
    if r.pos != r.buf.len() {
        return Err(Error::InconsistentInputs(format!(
            "{} unread bytes before the checksum",
            r.buf.len() - r.pos
        )));
    }
    Ok(())
}

/// Analytic size of a compressed model file.
pub fn compressed_size(cp: &CompressedPosterior) -> usize {
    let k = cp.gmm.k();
    let id = if k <= u16::MAX as usize { 2 } else { 4 };
    let header = 4 + 2 + 2 + 8 + 4 + 8 + 8 + 4 + 8 * cp.layout.n_layers();
    let index: usize = cp
        .assignments
        .iter()
        .map(|a| match a {
            WeightAssignment::Single { .. } => 1 + id,
            WeightAssignment::Blended { entries } => 2 + entries.len() * (id + 4),
            WeightAssignment::Outlier { .. } => 1,
        })
        .sum();
    header + 24 * k + 16 * cp.counts().n_outliers + index + 4
}

pub fn encode_compressed(cp: &CompressedPosterior) -> Result<Vec<u8>> {
    cp.validate()?;
    let k = cp.gmm.k();
    let wide = k > u16::MAX as usize;
    let counts = cp.counts();
    let mut w = Writer::default();
    w.bytes(COMPRESSED_MAGIC);
    w.u16(VERSION);
    w.u16(if wide { FLAG_WIDE_IDS } else { 0 });
    w.u64(cp.n_weights() as u64);
    w.u32(k as u32);
    w.u64(counts.n_outliers as u64);
    w.u64(counts.n_ellipses as u64);
    w.layers(&cp.layout);
    for c in &cp.gmm.components {
        w.f32(c.weight);
        w.f32(c.gauss.mean[0]);
        w.f32(c.gauss.mean[1]);
        w.f32(c.gauss.cov.a);
        w.f32(c.gauss.cov.b);
        w.f32(c.gauss.cov.c);
    }
    for (i, mu, sigma) in cp.outliers() {
        w.u64(i as u64);
        w.f32(mu);
        w.f32(sigma);
    }
    let id = |w: &mut Writer, c: u32| if wide { w.u32(c) } else { w.u16(c as u16) };
    for a in &cp.assignments {
        match a {
            WeightAssignment::Single { component } => {
                w.u8(TAG_SINGLE);
                id(&mut w, *component);
            }
            WeightAssignment::Blended { entries } => {
                w.u8(TAG_BLENDED);
                w.u8(entries.len() as u8);
                for &(c, alpha) in entries {
                    id(&mut w, c);
                    w.f32(alpha);
                }
            }
            WeightAssignment::Outlier { .. } => w.u8(TAG_OUTLIER),
        }
    }
    Ok(w.finish())
}

pub fn decode_compressed(bytes: &[u8]) -> Result<CompressedPosterior> {
    let (mut r, flags) = open(bytes, COMPRESSED_MAGIC)?;
    let wide = flags & FLAG_WIDE_IDS != 0;
    let n_w = r.usize()?;
    let k = r.u32()? as usize;
    let n_outliers = r.usize()?;
    let n_ellipses = r.usize()?;
    let layout = r.layers()?;
    if layout.n_weights() != n_w {
        return Err(Error::ShapeMismatch(format!(
            "header says {n_w} weights, layer table gives {}",
            layout.n_weights()
        )));
    }
    if wide != (k > u16::MAX as usize) {
        return Err(Error::InconsistentInputs(format!(
            "id width flag does not match K = {k}"
        )));
    }
    let mut components = Vec::with_capacity(k.min(1 << 20));
    for _ in 0..k {
        let weight = r.f32()?;
        let mean = [r.f32()?, r.f32()?];
        let cov = Spd2::new(r.f32()?, r.f32()?, r.f32()?);
        components.push(GaussianComponent {
            weight,
            gauss: Gaussian2::new(mean, cov),
            member_count: 0,
        });
    }
    let mut outliers = Vec::with_capacity(n_outliers.min(n_w));
    for _ in 0..n_outliers {
        outliers.push((r.usize()?, r.f32()?, r.f32()?));
    }
    let mut assignments = Vec::with_capacity(n_w);
    let mut next_outlier = 0;
    for i in 0..n_w {
        let tag = r.u8()?;
        let id = |r: &mut Reader<'_>| -> Result<u32> {
            if wide {
                r.u32()
            } else {
                r.u16().map(u32::from)
            }
        };
        let a = match tag {
            TAG_SINGLE => WeightAssignment::Single { component: id(&mut r)? },
            TAG_BLENDED => {
                let n = r.u8()? as usize;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push((id(&mut r)?, r.f32()?));
                }
                WeightAssignment::Blended { entries }
            }
            TAG_OUTLIER => {
                let Some(&(idx, mu, sigma)) = outliers.get(next_outlier) else {
                    return Err(Error::InconsistentInputs(format!(
                        "weight {i} is an outlier missing from the table"
                    )));
                };
                if idx != i {
                    return Err(Error::InconsistentInputs(format!(
                        "outlier table entry {next_outlier} is weight {idx}, index says {i}"
                    )));
                }
                next_outlier += 1;
                WeightAssignment::Outlier { mu, sigma }
            }
            t => return Err(Error::InconsistentInputs(format!("weight {i} has entry type {t}"))),
        };
        assignments.push(a);
    }
    trailing(&r)?;
    let mut cp = CompressedPosterior {
        layout,
        gmm: GmmModel { components },
        assignments,
    };
    let counts = cp.counts();
    if counts.n_outliers != n_outliers || counts.n_ellipses != n_ellipses {
        return Err(Error::InconsistentInputs(format!(
            "header counts ({n_outliers}, {n_ellipses}) disagree with the index ({}, {})",
            counts.n_outliers, counts.n_ellipses
        )));
    }
    cp.recount_members();
    cp.validate()?;
    Ok(cp)
}

/// Writes the model and returns the file size in bytes.
pub fn save_compressed(cp: &CompressedPosterior, path: &Path) -> Result<usize> {
    let bytes = encode_compressed(cp)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn load_compressed(path: &Path) -> Result<CompressedPosterior> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_compressed(&bytes)
}

pub fn encode_dense(net: &Network) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(DENSE_MAGIC);
    w.u16(VERSION);
    w.u16(0);
    w.layers(&net.layout);
    w.u64(net.n_weights() as u64);
    for &m in &net.mu {
        w.f32(m);
    }
    for &s in &net.sigma {
        w.f32(s);
    }
    w.finish()
}

/// Decodes a dense checkpoint; with `expected` set, the stored layer sizes
/// must equal it.
pub fn decode_dense(bytes: &[u8], expected: Option<&[usize]>) -> Result<Network> {
    let (mut r, _) = open(bytes, DENSE_MAGIC)?;
    let layout = r.layers()?;
    if let Some(dims) = expected {
        if layout.dims() != dims {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint architecture {:?}, expected {dims:?}",
                layout.dims()
            )));
        }
    }
    let n = r.usize()?;
    if n != layout.n_weights() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint stores {n} weights, layer table gives {}",
            layout.n_weights()
        )));
    }
    let read = |r: &mut Reader<'_>| (0..n).map(|_| r.f32()).collect::<Result<Vec<f64>>>();
    let mu = read(&mut r)?;
    let sigma = read(&mut r)?;
    trailing(&r)?;
    Network::from_parts(layout, mu, sigma)
}

pub fn save_dense_checkpoint(net: &Network, path: &Path) -> Result<usize> {
    let bytes = encode_dense(net);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn load_dense_checkpoint(path: &Path, expected: Option<&[usize]>) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dense(&bytes, expected)
}
