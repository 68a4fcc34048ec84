//! Dense array types and the on-disk formats shared by every pipeline stage.
//!
//! Three formats are supported:
//!
//! - `TNSR`: a small binary container for rank-3 `f32` tensors
//!   (`"TNSR"`, version 1, dtype 1, rank 3, a reserved zero byte, three
//!   little-endian `u32` dims, then the little-endian payload).
//! - binary PPM (`P6`, maxval 255) for RGB images.
//! - binary PGM (`P5`, maxval 255) for label maps and binary masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSR_VERSION: u8 = 1;
const TNSR_DTYPE_F32: u8 = 1;
const TNSR_RANK: u8 = 3;
const TNSR_HEADER_LEN: usize = 20;

/// Channel-major dense tensor of shape `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    /// Builds a tensor, rejecting zero dimensions, length mismatches and
    /// non-finite values.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "tensor dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {channels}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite tensor value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_f64(channels: usize, height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "tensor dims must be positive");
        assert!(value.is_finite());
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sets one value. Panics on a non-finite value.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        assert!(value.is_finite(), "non-finite tensor value");
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn same_plane(&self, other: &Tensor3) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel class indices, `IGNORE_LABEL` for excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "label map dims must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Checks that every non-ignore label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && usize::from(l) >= num_classes)
        {
            Some(&l) => Err(Error::Precondition(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Mask of pixels carrying `label`.
    pub fn mask_of(&self, label: u8) -> BitMask {
        BitMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }
}

/// Binary `height × width` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask dims must be positive, got {height}x{width}"
            )));
        }
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    fn filled(height: usize, width: usize, value: bool) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(height > 0 && width > 0);
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> BitMask {
        BitMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn union(&self, other: &BitMask) -> BitMask {
        assert!(self.same_shape(other));
        BitMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn intersection(&self, other: &BitMask) -> BitMask {
        assert!(self.same_shape(other));
        BitMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn same_shape(&self, other: &BitMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

// ---------------------------------------------------------------------------
// TNSR

pub fn encode_tensor(t: &Tensor3) -> Vec<u8> {
    let mut out = Vec::with_capacity(TNSR_HEADER_LEN + 4 * t.data.len());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&[TNSR_VERSION, TNSR_DTYPE_F32, TNSR_RANK, 0]);
    for dim in [t.channels, t.height, t.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor3> {
    if bytes.len() < TNSR_HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("{} bytes is shorter than the {TNSR_HEADER_LEN}-byte header", bytes.len()),
        ));
    }
    if &bytes[0..4] != TNSR_MAGIC {
        return Err(Error::format("magic", format!("expected \"TNSR\", found {:?}", &bytes[0..4])));
    }
    if bytes[4] != TNSR_VERSION {
        return Err(Error::format("version", format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != TNSR_DTYPE_F32 {
        return Err(Error::format("dtype", format!("unsupported dtype {}", bytes[5])));
    }
    if bytes[6] != TNSR_RANK {
        return Err(Error::format("rank", format!("expected rank 3, found {}", bytes[6])));
    }
    if bytes[7] != 0 {
        return Err(Error::format("reserved", format!("reserved byte must be 0, found {}", bytes[7])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format("dims", format!("zero dimension in {c}x{h}x{w}")));
    }
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format("dims", format!("{c}x{h}x{w} overflows")))?;
    let payload = &bytes[TNSR_HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::Length {
            expected: count * 4,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor3::new(c, h, w, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

// ---------------------------------------------------------------------------
// Netpbm

struct PnmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &'static str) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(Error::format("magic", format!("expected {magic} header")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each numeric field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(Error::format("header", format!("missing {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("header", format!("bad {name}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("header", "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format("maxval", format!("expected 255, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("header", format!("zero dimension {width}x{height}")));
    }
    Ok(PnmHeader {
        width,
        height,
        data_offset: pos,
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(t: &Tensor3) -> Result<Vec<u8>> {
    if t.channels != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {}", t.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", t.width, t.height).into_bytes();
    let n = t.plane_len();
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(t.data[c * n + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor3> {
    let hdr = parse_pnm_header(bytes, "P6")?;
    let n = hdr.width * hdr.height;
    let payload = &bytes[hdr.data_offset..];
    if payload.len() < 3 * n {
        return Err(Error::Length {
            expected: 3 * n,
            found: payload.len(),
        });
    }
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = f32::from(payload[3 * i + c]) / 255.0;
        }
    }
    Tensor3::new(3, hdr.height, hdr.width, data)
}

pub fn write_image_ppm(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_image_ppm(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Returns `(height, width, raw bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let hdr = parse_pnm_header(bytes, "P5")?;
    let n = hdr.width * hdr.height;
    let payload = &bytes[hdr.data_offset..];
    if payload.len() < n {
        return Err(Error::Length {
            expected: n,
            found: payload.len(),
        });
    }
    Ok((hdr.height, hdr.width, payload[..n].to_vec()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_label_pgm(path: impl AsRef<Path>, m: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(m.height, m.width, &m.labels)).map_err(|e| Error::io(path, e))
}

pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (h, w, labels) = decode_pgm(&read_file(path.as_ref())?)?;
    LabelMap::new(h, w, labels)
}

/// Masks are stored as 0 / 255 bytes.
pub fn write_mask_pgm(path: impl AsRef<Path>, m: &BitMask) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = m.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    fs::write(path, encode_pgm(m.height, m.width, &bytes)).map_err(|e| Error::io(path, e))
}

/// Any nonzero byte reads as set.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<BitMask> {
    let (h, w, bytes) = decode_pgm(&read_file(path.as_ref())?)?;
    BitMask::new(h, w, bytes.into_iter().map(|b| b != 0).collect())
}

/// Linear 0-255 grayscale rendering of a single-channel map with values in `[0, 1]`.
pub fn write_heat_pgm(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let path = path.as_ref();
    if t.channels != 1 {
        return Err(Error::Shape(format!("heat map needs 1 channel, got {}", t.channels)));
    }
    let bytes: Vec<u8> = t.data.iter().map(|&v| quantize(v)).collect();
    fs::write(path, encode_pgm(t.height, t.width, &bytes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_zero_tensor_layout() {
        let t = Tensor3::zeros(1, 1, 1);
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[0..8], b"TNSR\x01\x01\x03\x00");
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..], &[0, 0, 0, 0]);
    }

    #[test]
    fn ones_payload_is_ieee_one() {
        let t = Tensor3::filled(2, 2, 2, 1.0);
        let bytes = encode_tensor(&t);
        let payload = &bytes[TNSR_HEADER_LEN..];
        assert_eq!(payload.len(), 32);
        for chunk in payload.chunks(4) {
            assert_eq!(chunk, &[0x00, 0x00, 0x80, 0x3F]);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let data: Vec<f32> = (0..4 * 8 * 8).map(|i| (i as f32 * 0.37).sin()).collect();
        let t = Tensor3::new(4, 8, 8, data).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_tensor(&Tensor3::zeros(1, 1, 1));
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { field: "magic", .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = encode_tensor(&Tensor3::zeros(2, 2, 2));
        bytes.truncate(TNSR_HEADER_LEN + 7 * 4);
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::Length {
                expected: 32,
                found: 28
            })
        ));
    }

    #[test]
    fn every_header_field_is_checked() {
        let good = encode_tensor(&Tensor3::zeros(2, 3, 4));
        for (i, field) in [(4, "version"), (5, "dtype"), (6, "rank"), (7, "reserved")] {
            let mut bad = good.clone();
            bad[i] ^= 0x40;
            match decode_tensor(&bad) {
                Err(Error::Format { field: f, .. }) => assert_eq!(f, field),
                other => panic!("byte {i}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Tensor3::new(1, 1, 2, vec![0.0]).is_err());
        assert!(Tensor3::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Tensor3::new(1, 1, 1, vec![f32::INFINITY]).is_err());
        assert!(Tensor3::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn black_ppm_reads_as_zeros() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 12]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!((t.channels(), t.height(), t.width()), (3, 2, 2));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn red_pixel_channels() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_header_errors() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0; 6]);
        assert!(matches!(decode_ppm(&bytes), Err(Error::Format { field: "maxval", .. })));
    }

    #[test]
    fn pgm_labels_and_ignore() {
        let mut bytes = b"P5\n3 2\n# comment\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 3, 3, 3, 3, 255]);
        let m = decode_pgm(&bytes).map(|(h, w, l)| LabelMap::new(h, w, l).unwrap()).unwrap();
        assert_eq!(m.get(0, 0), 3);
        assert_eq!(m.get(1, 2), IGNORE_LABEL);
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn mask_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = BitMask::from_fn(5, 7, |y, x| (x * y) % 3 == 1);
        write_mask_pgm(&path, &m).unwrap();
        assert_eq!(read_mask_pgm(&path).unwrap(), m);
    }

    #[test]
    fn label_validation() {
        let m = LabelMap::new(1, 3, vec![0, 2, IGNORE_LABEL]).unwrap();
        assert!(m.validate(3).is_ok());
        assert!(m.validate(2).is_err());
    }

    proptest! {
        #[test]
        fn tnsr_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let n = c * h * w;
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(((seed.wrapping_mul(i as u64 + 1) >> 11) as u32) & 0x7f7f_ffff) * if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect();
            let t = Tensor3::new(c, h, w, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn ppm_quantized_round_trip(h in 1usize..6, w in 1usize..6, vals in proptest::collection::vec(0f32..=1.0, 75)) {
            let data = vals[..3 * h * w].to_vec();
            let t = Tensor3::new(3, h, w, data).unwrap();
            let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }

        #[test]
        fn pgm_round_trip(h in 1usize..8, w in 1usize..8, vals in proptest::collection::vec(any::<u8>(), 64)) {
            let labels = vals[..h * w].to_vec();
            let bytes = encode_pgm(h, w, &labels);
            let (h2, w2, back) = decode_pgm(&bytes).unwrap();
            prop_assert_eq!((h2, w2), (h, w));
            prop_assert_eq!(back, labels);
        }

        #[test]
        fn corrupted_tnsr_header_rejected(pos in 0usize..8, flip in 1u8..=255) {
            let mut bytes = encode_tensor(&Tensor3::zeros(2, 2, 2));
            bytes[pos] ^= flip;
            prop_assert!(decode_tensor(&bytes).is_err());
        }

        #[test]
        fn corrupted_dims_never_decode_silently(pos in 8usize..20, flip in 1u8..=255) {
            let mut bytes = encode_tensor(&Tensor3::zeros(2, 2, 2));
            bytes[pos] ^= flip;
            // any dims change makes the payload length disagree
            prop_assert!(decode_tensor(&bytes).is_err());
        }
    }
}
