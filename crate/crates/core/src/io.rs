//! Section-tagged binary weight container and PPM image output.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "LACVIS\0\x01"
//! version  u32
//! count    u32      number of sections
//! section  repeated `count` times:
//!   tag     u32 length + UTF-8
//!   header  u32 length + UTF-8 JSON
//!   values  u64 count + f64 LE payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::{Encoder, EncoderConfig, Stage};
use crate::error::{Error, Result};
use crate::lac::LacParams;
use crate::math::{ConvLayer, ConvSpec, Matrix, SymMatrix, Tensor};
use crate::training::LinearProbe;

pub const MAGIC: [u8; 8] = *b"LACVIS\0\x01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: String,
    pub header: serde_json::Value,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<Section>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| fmt_err(e.to_string()))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| fmt_err("string too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

impl Container {
    pub fn push(&mut self, tag: &str, header: serde_json::Value, values: Vec<f64>) {
        self.sections.push(Section {
            tag: tag.to_string(),
            header,
            values,
        });
    }

    pub fn section(&self, tag: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.tag == tag)
            .ok_or_else(|| fmt_err(format!("missing section `{tag}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let n = u32::try_from(self.sections.len()).map_err(|_| fmt_err("too many sections"))?;
        w.write_all(&n.to_le_bytes())?;
        for s in &self.sections {
            write_string(w, &s.tag)?;
            write_string(w, &s.header.to_string())?;
            w.write_all(&(s.values.len() as u64).to_le_bytes())?;
            for v in &s.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let n = read_u32(r)?;
        let mut sections = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let tag = read_string(r)?;
            let header = serde_json::from_str(&read_string(r)?).map_err(|e| fmt_err(e.to_string()))?;
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let count = u64::from_le_bytes(b) as usize;
            let mut values = Vec::with_capacity(count.min(1 << 24));
            for _ in 0..count {
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            sections.push(Section { tag, header, values });
        }
        Ok(Self { sections })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let c = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(fmt_err(format!("{} trailing bytes", cursor.len())));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn header<T: for<'de> Deserialize<'de>>(s: &Section) -> Result<T> {
    serde_json::from_value(s.header.clone()).map_err(|e| fmt_err(format!("section `{}`: {e}", s.tag)))
}

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    config: EncoderConfig,
    layers: Vec<ConvSpec>,
}

pub fn encoder_section(enc: &Encoder) -> Section {
    let layers: Vec<ConvSpec> = enc.layers().iter().map(|l| l.spec()).collect();
    let values = enc.layers().iter().flat_map(|l| l.kernel().data().to_vec()).collect();
    Section {
        tag: "encoder".into(),
        header: serde_json::to_value(EncoderHeader {
            config: enc.config().clone(),
            layers,
        })
        .expect("serializable"),
        values,
    }
}

pub fn encoder_from_section(s: &Section) -> Result<Encoder> {
    let h: EncoderHeader = header(s)?;
    let mut offset = 0;
    let mut layers = Vec::with_capacity(h.layers.len());
    for spec in &h.layers {
        let n = spec.c_out * spec.c_in * spec.kernel * spec.kernel;
        let data = s
            .values
            .get(offset..offset + n)
            .ok_or_else(|| fmt_err("encoder payload too short"))?
            .to_vec();
        offset += n;
        let kernel = Tensor::new(vec![spec.c_out, spec.c_in, spec.kernel, spec.kernel], data)?;
        layers.push(ConvLayer::new(kernel, spec.stride, spec.padding)?);
    }
    if offset != s.values.len() {
        return Err(fmt_err("encoder payload length mismatch"));
    }
    let mut it = layers.into_iter();
    let stem = it.next().ok_or_else(|| fmt_err("encoder has no layers"))?;
    let mut stages = Vec::with_capacity(h.config.depth());
    for l in 0..h.config.depth() {
        let transition = if l > 0 { it.next() } else { None };
        let intra = it.next().ok_or_else(|| fmt_err("encoder payload missing a stage"))?;
        stages.push(Stage { transition, intra });
    }
    Encoder::from_parts(h.config, stem, stages)
}

pub fn lac_section(p: &LacParams) -> Section {
    Section {
        tag: "lac".into(),
        header: json!({
            "epsilon": p.epsilon,
            "groups": p.sites().iter().map(|&s| p.site(s).groups()).collect::<Vec<_>>(),
            "sites": p.sites().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        }),
        values: p.to_flat(),
    }
}

pub fn lac_from_section(s: &Section, enc: &Encoder) -> Result<LacParams> {
    #[derive(Deserialize)]
    struct H {
        epsilon: f64,
    }
    let h: H = header(s)?;
    let mut p = LacParams::init(enc, h.epsilon);
    p.set_flat(&s.values)?;
    Ok(p)
}

pub fn probe_section(p: &LinearProbe) -> Section {
    let mut values = p.weights.data().to_vec();
    values.extend_from_slice(&p.bias);
    Section {
        tag: "probe".into(),
        header: json!({
            "classes": p.weights.rows(),
            "features": p.weights.cols(),
            "train_accuracy": p.train_accuracy,
        }),
        values,
    }
}

pub fn probe_from_section(s: &Section) -> Result<LinearProbe> {
    #[derive(Deserialize)]
    struct H {
        classes: usize,
        features: usize,
        train_accuracy: f64,
    }
    let h: H = header(s)?;
    let n = h.classes * h.features;
    if s.values.len() != n + h.classes {
        return Err(fmt_err("probe payload length mismatch"));
    }
    Ok(LinearProbe {
        weights: Matrix::from_vec(h.classes, h.features, s.values[..n].to_vec())?,
        bias: s.values[n..].to_vec(),
        train_accuracy: h.train_accuracy,
    })
}

/// Full row-major payload, so the section can be replayed without knowing the packing.
pub fn covariance_section(tag: &str, m: &SymMatrix) -> Section {
    Section {
        tag: tag.into(),
        header: json!({ "dim": m.dim() }),
        values: m.to_dense().data().to_vec(),
    }
}

pub fn covariance_from_section(s: &Section) -> Result<SymMatrix> {
    #[derive(Deserialize)]
    struct H {
        dim: usize,
    }
    let h: H = header(s)?;
    let dense = Matrix::from_vec(h.dim, h.dim, s.values.clone())?;
    Ok(SymMatrix::from_upper(&dense))
}

/// Images stacked in order with their labels in the header.
pub fn dataset_section(images: &[&Tensor], labels: &[usize]) -> Section {
    let shape = images.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    Section {
        tag: "dataset".into(),
        header: json!({ "shape": shape, "labels": labels }),
        values: images.iter().flat_map(|t| t.data().to_vec()).collect(),
    }
}

pub fn dataset_from_section(s: &Section) -> Result<(Vec<Tensor>, Vec<usize>)> {
    #[derive(Deserialize)]
    struct H {
        shape: Vec<usize>,
        labels: Vec<usize>,
    }
    let h: H = header(s)?;
    let per: usize = h.shape.iter().product();
    if per * h.labels.len() != s.values.len() {
        return Err(fmt_err("dataset payload length mismatch"));
    }
    let images = s
        .values
        .chunks(per.max(1))
        .take(h.labels.len())
        .map(|c| Tensor::new(h.shape.clone(), c.to_vec()))
        .collect::<Result<_>>()?;
    Ok((images, h.labels))
}

/// Constants of the symmetric map `byte = round(255·(x + m)/(2m))`, `m = max|x|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Normalization {
    pub max_abs: f64,
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub fn of(t: &Tensor) -> Self {
        let m = t.max_abs();
        let m = if m > 0.0 { m } else { 1.0 };
        Self {
            max_abs: t.max_abs(),
            offset: m,
            scale: 255.0 / (2.0 * m),
        }
    }

    pub fn encode(&self, x: f64) -> u8 {
        ((x + self.offset) * self.scale).round().clamp(0.0, 255.0) as u8
    }

    pub fn decode(&self, b: u8) -> f64 {
        b as f64 / self.scale - self.offset
    }
}

/// Interleaved RGB bytes for a `[3|1, H, W]` tensor. One plane is replicated to grey.
pub fn rgb_bytes(t: &Tensor, norm: &Normalization) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = t.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::Invalid(format!("image needs 1 or 3 planes, got {c}")));
    }
    let p = h * w;
    let mut out = Vec::with_capacity(3 * p);
    for i in 0..p {
        for ch in 0..3 {
            let plane = if c == 1 { 0 } else { ch };
            out.push(norm.encode(t.data()[plane * p + i]));
        }
    }
    Ok((h, w, out))
}

/// Binary PPM (P6) with symmetric normalisation; returns the constants used.
pub fn ppm_bytes(t: &Tensor) -> Result<(Vec<u8>, Normalization)> {
    let norm = Normalization::of(t);
    let (h, w, rgb) = rgb_bytes(t, &norm)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok((out, norm))
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<Normalization> {
    let (bytes, norm) = ppm_bytes(t)?;
    std::fs::write(path, bytes)?;
    Ok(norm)
}

/// Tiles equally shaped images row-major into a grid with a one-pixel zero gutter.
pub fn tile(images: &[Tensor], columns: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("nothing to tile".into()))?;
    let (c, h, w) = first.dims3()?;
    let columns = columns.max(1);
    let rows = images.len().div_ceil(columns);
    let (gh, gw) = (rows * (h + 1) - 1, columns * (w + 1) - 1);
    let mut out = Tensor::zeros(&[c, gh, gw]);
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::Invalid("tiled images must share a shape".into()));
        }
        let (r0, c0) = ((k / columns) * (h + 1), (k % columns) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[ch * gh * gw + (r0 + y) * gw + c0 + x] = img.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build_encoder;

    #[test]
    fn encoder_and_lac_round_trip() {
        let enc = build_encoder(&EncoderConfig::default(), 3).unwrap();
        let mut p = LacParams::init(&enc, 1e-5);
        let flat: Vec<f64> = (0..p.num_params()).map(|i| i as f64 * 0.37 - 1.0).collect();
        p.set_flat(&flat).unwrap();
        let mut c = Container::default();
        c.sections.push(encoder_section(&enc));
        c.sections.push(lac_section(&p));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        let enc2 = encoder_from_section(back.section("encoder").unwrap()).unwrap();
        assert_eq!(enc2, enc);
        assert_eq!(lac_from_section(back.section("lac").unwrap(), &enc2).unwrap(), p);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut c = Container::default();
        c.push("x", json!({}), vec![1.0, 2.0]);
        let mut b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 3]).is_err());
        b[0] = b'X';
        assert!(Container::from_bytes(&b).is_err());
    }

    #[test]
    fn covariance_and_dataset_round_trip() {
        let m = SymMatrix::from_fn(3, |i, j| (i * 3 + j) as f64 + if i == j { 5.0 } else { 0.0 });
        let s = covariance_section("sigma", &m);
        assert_eq!(covariance_from_section(&s).unwrap(), m);
        let a = Tensor::full(&[3, 2, 2], 1.5);
        let b = Tensor::full(&[3, 2, 2], -0.5);
        let (imgs, labels) = dataset_from_section(&dataset_section(&[&a, &b], &[2, 0])).unwrap();
        assert_eq!(imgs, vec![a, b]);
        assert_eq!(labels, vec![2, 0]);
    }

    #[test]
    fn ppm_header_and_symmetric_scale() {
        let t = Tensor::new(vec![1, 1, 3], vec![-2.0, 0.0, 2.0]).unwrap();
        let (bytes, norm) = ppm_bytes(&t).unwrap();
        assert!(bytes.starts_with(b"P6\n3 1\n255\n"));
        let px = &bytes[bytes.len() - 9..];
        assert_eq!(px, &[0, 0, 0, 128, 128, 128, 255, 255, 255]);
        assert!((norm.decode(255) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tile_places_images_on_grid() {
        let imgs: Vec<Tensor> = (0..3).map(|k| Tensor::full(&[1, 2, 2], k as f64 + 1.0)).collect();
        let g = tile(&imgs, 2).unwrap();
        assert_eq!(g.shape(), &[1, 5, 5]);
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[3], 2.0);
        assert_eq!(g.data()[2], 0.0);
        assert_eq!(g.data()[3 * 5], 3.0);
        assert_eq!(g.data()[3 * 5 + 3], 0.0);
    }
}
