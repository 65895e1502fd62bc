//! Image preprocessing: binarization, overlapping patch extraction, and
//! single-pass Hamming-ball alphabet quantization, producing one discrete
//! variable per patch.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{Alphabet, DiscreteDataset};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: u16 = 40;
pub const DEFAULT_RADIUS: usize = 3;
pub const RAW_MAGIC: &[u8; 4] = b"MCRW";

/// Grayscale raster, row-major. Values are expected in `0..=255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u16>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::format(
                None,
                format!("{} pixels for a {height}x{width} image", pixels.len()),
            ));
        }
        Ok(Self { height, width, pixels })
    }

    /// Binary (P5) PGM encoding with maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| p.min(255) as u8));
        out
    }
}

/// 0/1 raster produced by [`binarize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

/// `pixel >= threshold` becomes 1.
pub fn binarize(image: &GrayImage, threshold: u16) -> Result<BinaryImage> {
    if let Some(pos) = image.pixels.iter().position(|&p| p > 255) {
        return Err(Error::format(
            None,
            format!("pixel {pos} has value {} outside 0..=255", image.pixels[pos]),
        ));
    }
    Ok(BinaryImage {
        height: image.height,
        width: image.width,
        bits: image.pixels.iter().map(|&p| p >= threshold).collect(),
    })
}

/// Fixed-length bit vector packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitPattern {
    len: usize,
    words: Vec<u64>,
}

impl BitPattern {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self { len: bits.len(), words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn hamming(&self, other: &BitPattern) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }
}

impl std::fmt::Display for BitPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Overlapping square patches laid on a fixed image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for PatchGrid {
    /// 28x28 images, 8x8 grid of 6x6 patches.
    fn default() -> Self {
        Self::with_defaults(28, 28).expect("valid default grid")
    }
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 {
            return Err(Error::Validation("patch size and stride must be positive".into()));
        }
        // trailing pixels past the last full patch are dropped
        let fit = |n: usize, what: &str| -> Result<usize> {
            if n < patch {
                return Err(Error::format(None, format!("image {what} {n} is smaller than the {patch}-pixel patch")));
            }
            Ok((n - patch) / stride + 1)
        };
        let rows = fit(height, "height")?;
        let cols = fit(width, "width")?;
        Ok(Self {
            height,
            width,
            patch,
            stride,
            rows,
            cols,
        })
    }

    /// 6-pixel patches at stride 3 on `height x width`.
    pub fn with_defaults(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 6, 3)
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Patches in row-major grid order, each flattened row-major.
pub fn patchify(image: &BinaryImage, grid: &PatchGrid) -> Result<Vec<BitPattern>> {
    if image.height != grid.height || image.width != grid.width {
        return Err(Error::format(
            None,
            format!(
                "image is {}x{}, grid expects {}x{}",
                image.height, image.width, grid.height, grid.width
            ),
        ));
    }
    let mut out = Vec::with_capacity(grid.count());
    let mut buf = Vec::with_capacity(grid.patch * grid.patch);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            buf.clear();
            for y in r * grid.stride..r * grid.stride + grid.patch {
                for x in c * grid.stride..c * grid.stride + grid.patch {
                    buf.push(image.bits[y * image.width + x]);
                }
            }
            out.push(BitPattern::from_bits(&buf));
        }
    }
    Ok(out)
}

/// Representatives and the code of every input vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantized {
    pub representatives: Vec<BitPattern>,
    pub codes: Vec<usize>,
}

/// Single pass in input order: a vector joins the first representative (in
/// creation order) within Hamming distance `radius`, otherwise it becomes a
/// new representative.
pub fn quantize_alphabet(vectors: &[BitPattern], radius: usize) -> Result<Quantized> {
    if let Some(first) = vectors.first() {
        if let Some(i) = vectors.iter().position(|v| v.len() != first.len()) {
            return Err(Error::Domain(format!(
                "vector {i} has length {}, expected {}",
                vectors[i].len(),
                first.len()
            )));
        }
    }
    let mut reps: Vec<BitPattern> = Vec::new();
    let mut codes = Vec::with_capacity(vectors.len());
    for v in vectors {
        match reps.iter().position(|r| r.hamming(v) <= radius) {
            Some(id) => codes.push(id),
            None => {
                codes.push(reps.len());
                reps.push(v.clone());
            }
        }
    }
    Ok(Quantized {
        representatives: reps,
        codes,
    })
}

/// Code of a vector under a frozen alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrozenCode {
    pub id: usize,
    pub distance: usize,
    pub beyond_radius: bool,
}

/// Map vectors to the nearest existing representative (ties to the lowest ID),
/// flagging those farther than `radius`.
pub fn encode_frozen(representatives: &[BitPattern], vectors: &[BitPattern], radius: usize) -> Result<Vec<FrozenCode>> {
    if representatives.is_empty() {
        return Err(Error::EmptyInput("no representatives to encode against".into()));
    }
    vectors
        .iter()
        .map(|v| {
            if v.len() != representatives[0].len() {
                return Err(Error::Domain("vector length differs from the representatives".into()));
            }
            let (id, distance) = representatives
                .iter()
                .enumerate()
                .map(|(i, r)| (i, r.hamming(v)))
                .min_by_key(|&(i, dist)| (dist, i))
                .expect("non-empty");
            Ok(FrozenCode {
                id,
                distance,
                beyond_radius: distance > radius,
            })
        })
        .collect()
}

/// Options for [`build_patch_dataset`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PatchOptions {
    pub grid: PatchGrid,
    pub threshold: u16,
    pub radius: usize,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            grid: PatchGrid::default(),
            threshold: DEFAULT_THRESHOLD,
            radius: DEFAULT_RADIUS,
        }
    }
}

/// Patch dataset with the representative bit patterns of every variable.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub dataset: DiscreteDataset,
    pub grid: PatchGrid,
    pub representatives: Vec<Vec<BitPattern>>,
}

/// One variable per patch; each patch position is quantized independently.
pub fn build_patch_dataset(images: &[GrayImage], opts: &PatchOptions) -> Result<PatchDataset> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no images".into()));
    }
    let grid = opts.grid;
    let patches: Vec<Vec<BitPattern>> = images
        .iter()
        .enumerate()
        .map(|(n, img)| {
            if img.height != grid.height || img.width != grid.width {
                return Err(Error::format(
                    Some(n + 1),
                    format!("image {n} is {}x{}, expected {}x{}", img.height, img.width, grid.height, grid.width),
                ));
            }
            patchify(&binarize(img, opts.threshold)?, &grid)
        })
        .collect::<Result<_>>()?;
    let per_patch: Vec<Quantized> = (0..grid.count())
        .into_par_iter()
        .map(|p| {
            let column: Vec<BitPattern> = patches.iter().map(|v| v[p].clone()).collect();
            quantize_alphabet(&column, opts.radius)
        })
        .collect::<Result<_>>()?;
    let names = (0..grid.count())
        .map(|p| format!("P{}_{}", p / grid.cols, p % grid.cols))
        .collect();
    let alphabets = per_patch
        .iter()
        .map(|q| Alphabet::indexed(q.representatives.len()))
        .collect::<Result<Vec<_>>>()?;
    let samples = (0..images.len())
        .map(|n| per_patch.iter().map(|q| q.codes[n]).collect())
        .collect();
    let dataset = DiscreteDataset::new(names, alphabets, samples)?;
    Ok(PatchDataset {
        dataset,
        grid,
        representatives: per_patch.into_iter().map(|q| q.representatives).collect(),
    })
}

fn pgm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut pos = 2;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(None, "truncated or malformed PGM header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        out.push(tok.parse().map_err(|_| Error::format(None, format!("bad PGM number {tok}")))?);
    }
    Ok((out, pos))
}

/// Parse a binary (P5) or ASCII (P2) portable graymap.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'2') {
        return Err(Error::format(None, "not a P5/P2 graymap"));
    }
    let ascii = bytes[1] == b'2';
    let (hdr, pos) = pgm_tokens(bytes, 3)?;
    let (width, height, maxval) = (hdr[0], hdr[1], hdr[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(None, format!("invalid maxval {maxval}")));
    }
    let n = width * height;
    let pixels: Vec<u16> = if ascii {
        let (vals, _) = pgm_tokens(&bytes[pos - 2..], n).map_err(|_| Error::format(None, "truncated P2 pixel data"))?;
        vals.into_iter().map(|v| v.min(u16::MAX as usize) as u16).collect()
    } else {
        let data = &bytes[pos + 1..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < need {
            return Err(Error::format(None, format!("P5 data has {} bytes, need {need}", data.len())));
        }
        if wide {
            data[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            data[..n].iter().map(|&b| b as u16).collect()
        }
    };
    GrayImage::new(height, width, pixels)
}

/// Parse the raw container: `MCRW`, then little-endian u32 height, width,
/// count, then `count * height * width` bytes.
pub fn parse_raw(bytes: &[u8]) -> Result<Vec<GrayImage>> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(None, "missing MCRW header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, n) = (u32_at(4), u32_at(8), u32_at(12));
    let size = h * w;
    let body = &bytes[16..];
    if body.len() != size * n {
        return Err(Error::format(
            None,
            format!("raw body has {} bytes, header promises {}", body.len(), size * n),
        ));
    }
    (0..n)
        .map(|i| GrayImage::new(h, w, body[i * size..(i + 1) * size].iter().map(|&b| b as u16).collect()))
        .collect()
}

/// Serialize images into the raw container.
pub fn to_raw(images: &[GrayImage]) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| Error::EmptyInput("no images".into()))?;
    let mut out = Vec::with_capacity(16 + images.len() * first.pixels.len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [first.height, first.width, images.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        if img.height != first.height || img.width != first.width {
            return Err(Error::format(None, "images differ in size"));
        }
        out.extend(img.pixels.iter().map(|&p| p.min(255) as u8));
    }
    Ok(out)
}

/// Load images from a PGM or raw file, by content.
pub fn load_images(path: impl AsRef<Path>) -> Result<Vec<GrayImage>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.starts_with(RAW_MAGIC) {
        parse_raw(&bytes)
    } else {
        Ok(vec![parse_pgm(&bytes)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> BitPattern {
        BitPattern::from_bits(&s.chars().map(|c| c == '1').collect::<Vec<_>>())
    }

    #[test]
    fn binarize_threshold() {
        let img = GrayImage::new(1, 3, vec![39, 40, 255]).unwrap();
        assert_eq!(binarize(&img, 40).unwrap().bits, vec![false, true, true]);
        assert!(binarize(&img, 0).unwrap().bits.iter().all(|&b| b));
        let zero = GrayImage::new(2, 2, vec![0; 4]).unwrap();
        assert!(binarize(&zero, 40).unwrap().bits.iter().all(|&b| !b));
        let bad = GrayImage::new(1, 1, vec![256]).unwrap();
        assert!(matches!(binarize(&bad, 40), Err(Error::Format { .. })));
    }

    #[test]
    fn default_grid() {
        let g = PatchGrid::default();
        assert_eq!((g.rows, g.cols), (8, 8));
        let img = BinaryImage {
            height: 28,
            width: 28,
            bits: vec![true; 784],
        };
        let p = patchify(&img, &g).unwrap();
        assert_eq!(p.len(), 64);
        assert!(p.iter().all(|v| v.len() == 36 && *v == p[0]));
        let big = BinaryImage {
            height: 29,
            width: 29,
            bits: vec![false; 841],
        };
        assert!(matches!(patchify(&big, &g), Err(Error::Format { .. })));
        assert!(PatchGrid::with_defaults(5, 28).is_err());
    }

    #[test]
    fn patch_contents() {
        // 9x9 image, pixel (y,x) set iff x == 4
        let bitsv: Vec<bool> = (0..81).map(|i| i % 9 == 4).collect();
        let img = BinaryImage { height: 9, width: 9, bits: bitsv };
        let g = PatchGrid::with_defaults(9, 9).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        let p = patchify(&img, &g).unwrap();
        assert_eq!(p.len(), 4);
        // patch (0,0) covers x 0..6: column 4 set in each row
        assert_eq!(p[0].to_string(), "000010".repeat(6));
        // patch (0,1) covers x 3..9: column 4 is local column 1
        assert_eq!(p[1].to_string(), "010000".repeat(6));
    }

    #[test]
    fn quantize_examples() {
        let a = bits("000000000");
        let b = bits("000001000");
        let q = quantize_alphabet(&[a.clone(), b], 3).unwrap();
        assert_eq!(q.representatives.len(), 1);
        assert_eq!(q.codes, vec![0, 0]);
        let far = bits("111100000");
        assert_eq!(quantize_alphabet(&[a.clone(), far], 3).unwrap().representatives.len(), 2);
        let w = bits("111110000");
        let q = quantize_alphabet(&[a.clone(), w, a], 3).unwrap();
        assert_eq!(q.codes, vec![0, 1, 0]);
    }

    #[test]
    fn larger_radius_can_create_more_representatives() {
        // first-fit leader clustering is not monotone in the radius
        let a = bits("0000111");
        let b = bits("0000000");
        let c = bits("1100000");
        let d = bits("0011000");
        let seq = [a, b, c, d];
        assert_eq!(quantize_alphabet(&seq, 2).unwrap().representatives.len(), 2);
        assert_eq!(quantize_alphabet(&seq, 3).unwrap().representatives.len(), 3);
    }

    #[test]
    fn frozen_encoding() {
        let reps = vec![bits("0000"), bits("1111")];
        let codes = encode_frozen(&reps, &[bits("0011"), bits("1110"), bits("0000")], 1).unwrap();
        assert_eq!(codes[0], FrozenCode { id: 0, distance: 2, beyond_radius: true });
        assert_eq!(codes[1].id, 1);
        assert_eq!(codes[2].distance, 0);
    }

    #[test]
    fn patch_dataset_identical_images() {
        let img = GrayImage::new(28, 28, (0..784).map(|i| (i % 255) as u16).collect()).unwrap();
        let pd = build_patch_dataset(&[img.clone(), img], &PatchOptions::default()).unwrap();
        assert_eq!(pd.dataset.d(), 64);
        assert_eq!(pd.dataset.n(), 2);
        assert!(pd.dataset.alphabets().iter().all(|a| a.size() == 1));
        assert!(matches!(build_patch_dataset(&[], &PatchOptions::default()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn pgm_and_raw_round_trip() {
        let img = GrayImage::new(2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        assert_eq!(parse_pgm(&img.to_pgm()).unwrap(), img);
        let ascii = b"P2\n# comment\n3 2\n255\n0 10 20\n30 40 255\n";
        assert_eq!(parse_pgm(ascii).unwrap(), img);
        let raw = to_raw(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(parse_raw(&raw).unwrap(), vec![img.clone(), img]);
        assert!(parse_raw(b"MCRW\x01\0\0\0").is_err());
    }
}
