use std::io::{BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Sentinel for pixels with no depth. Any non-finite value read from disk is
/// normalized to this.
pub const INVALID_DEPTH: f64 = f64::INFINITY;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {expected} values expected, {actual} given")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("finite depth values must be positive (value {value} at index {index})")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("mask values must be 0 or 1 (value {value} at index {index})")]
    BadMaskValue { index: usize, value: u8 },
    #[error("{format} parse error: {message}")]
    Parse { format: &'static str, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(format: &'static str, message: impl Into<String>) -> ImageError {
    ImageError::Parse {
        format,
        message: message.into(),
    }
}

/// Per-pixel metric depth along the camera z axis. Finite values are
/// strictly positive; invalid pixels hold a non-finite sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::DimensionMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if v.is_finite() && v <= 0.0 {
                return Err(ImageError::NonPositiveDepth { index: i, value: v });
            }
        }
        Ok(DepthMap { width, height, data })
    }

    /// All pixels invalid.
    pub fn empty(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![INVALID_DEPTH; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Caller keeps the positivity invariant; non-positive finite values are
    /// stored as the invalid sentinel.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = if v.is_finite() && v <= 0.0 { INVALID_DEPTH } else { v };
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y).is_finite()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }

    /// Keeps depth only where `mask` is 1.
    pub fn masked(&self, mask: &BinaryMask) -> DepthMap {
        assert_eq!((self.width, self.height), (mask.width, mask.height));
        let data = self
            .data
            .iter()
            .zip(mask.data().iter())
            .map(|(&d, &m)| if m == 1 { d } else { INVALID_DEPTH })
            .collect();
        DepthMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// PFM, grayscale "Pf", scale -1.0 (little-endian), rows bottom-to-top
    /// per the format convention. Invalid pixels are written as +inf.
    pub fn write_pfm<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        write!(w, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let v = self.get(x, y) as f32;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let f = std::fs::File::create(path)?;
        self.write_pfm(std::io::BufWriter::new(f))
    }

    pub fn read_pfm<R: Read>(r: R) -> Result<Self, ImageError> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        // Three whitespace-delimited tokens: magic, "w h", scale.
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)
                .map_err(|_| parse_err("PFM", "truncated header"))?;
            if byte[0].is_ascii_whitespace() {
                if !header.is_empty() {
                    tokens.push(String::from_utf8_lossy(&header).into_owned());
                    header.clear();
                }
            } else {
                header.push(byte[0]);
            }
        }
        if tokens[0] != "Pf" {
            return Err(parse_err("PFM", format!("unsupported magic {}", tokens[0])));
        }
        let width: usize = tokens[1]
            .parse()
            .map_err(|_| parse_err("PFM", "bad width"))?;
        let height: usize = tokens[2]
            .parse()
            .map_err(|_| parse_err("PFM", "bad height"))?;
        let scale: f64 = tokens[3]
            .parse()
            .map_err(|_| parse_err("PFM", "bad scale"))?;
        let little_endian = scale < 0.0;
        let mut raw = vec![0u8; width * height * 4];
        r.read_exact(&mut raw)
            .map_err(|_| parse_err("PFM", "truncated pixel data"))?;
        let mut data = vec![INVALID_DEPTH; width * height];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            } as f64;
            let y = height - 1 - i / width;
            let x = i % width;
            data[y * width + x] = if v.is_finite() && v > 0.0 { v } else { INVALID_DEPTH };
        }
        Ok(DepthMap { width, height, data })
    }

    pub fn load_pfm(path: &Path) -> Result<Self, ImageError> {
        let f = std::fs::File::open(path)?;
        Self::read_pfm(f)
    }
}

/// Binary mask; every pixel is 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::DimensionMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if v > 1 {
                return Err(ImageError::BadMaskValue { index: i, value: v });
            }
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = (v != 0) as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn overlap_count(&self, other: &BinaryMask) -> usize {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(other.data.iter())
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count()
    }

    /// One 4-connected erosion pass, repeated `steps` times.
    pub fn eroded(&self, steps: usize) -> BinaryMask {
        let mut cur = self.clone();
        for _ in 0..steps {
            let mut next = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if cur.get(x, y) == 0 {
                        continue;
                    }
                    let at_border = x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height;
                    let keep = !at_border
                        && cur.get(x - 1, y) == 1
                        && cur.get(x + 1, y) == 1
                        && cur.get(x, y - 1) == 1
                        && cur.get(x, y + 1) == 1;
                    if !keep {
                        next.set(x, y, 0);
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// One 4-connected dilation pass, repeated `steps` times.
    pub fn dilated(&self, steps: usize) -> BinaryMask {
        let mut cur = self.clone();
        for _ in 0..steps {
            let mut next = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if cur.get(x, y) == 1 {
                        continue;
                    }
                    let hit = (x > 0 && cur.get(x - 1, y) == 1)
                        || (x + 1 < self.width && cur.get(x + 1, y) == 1)
                        || (y > 0 && cur.get(x, y - 1) == 1)
                        || (y + 1 < self.height && cur.get(x, y + 1) == 1);
                    if hit {
                        next.set(x, y, 1);
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// Mask pixels 4-adjacent to a zero pixel (or on the image border).
    pub fn boundary_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == 0 {
                    continue;
                }
                let at_border = x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height;
                if at_border
                    || self.get(x - 1, y) == 0
                    || self.get(x + 1, y) == 0
                    || self.get(x, y - 1) == 0
                    || self.get(x, y + 1) == 0
                {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Binary PGM (P5, maxval 255); 1 is stored as 255.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))
    }

    /// Values >= 128 read as 1.
    pub fn read_pgm<R: Read>(r: R) -> Result<Self, ImageError> {
        let mut r = BufReader::new(r);
        let mut tokens = Vec::new();
        let mut cur = Vec::new();
        let mut in_comment = false;
        while tokens.len() < 4 {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)
                .map_err(|_| parse_err("PGM", "truncated header"))?;
            let b = byte[0];
            if in_comment {
                if b == b'\n' {
                    in_comment = false;
                }
                continue;
            }
            if b == b'#' {
                in_comment = true;
                continue;
            }
            if b.is_ascii_whitespace() {
                if !cur.is_empty() {
                    tokens.push(String::from_utf8_lossy(&cur).into_owned());
                    cur.clear();
                }
            } else {
                cur.push(b);
            }
        }
        if tokens[0] != "P5" {
            return Err(parse_err("PGM", format!("unsupported magic {}", tokens[0])));
        }
        let width: usize = tokens[1].parse().map_err(|_| parse_err("PGM", "bad width"))?;
        let height: usize = tokens[2].parse().map_err(|_| parse_err("PGM", "bad height"))?;
        let maxval: usize = tokens[3].parse().map_err(|_| parse_err("PGM", "bad maxval"))?;
        if maxval == 0 || maxval > 255 {
            return Err(parse_err("PGM", format!("unsupported maxval {maxval}")));
        }
        let mut raw = vec![0u8; width * height];
        r.read_exact(&mut raw)
            .map_err(|_| parse_err("PGM", "truncated pixel data"))?;
        let data = raw.iter().map(|&v| (v >= 128) as u8).collect();
        Ok(BinaryMask { width, height, data })
    }

    pub fn load_pgm(path: &Path) -> Result<Self, ImageError> {
        let f = std::fs::File::open(path)?;
        Self::read_pgm(f)
    }
}

/// Grayscale intensity image in [0, 1], used as feature-extractor input.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::DimensionMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Deterministic depth shading: valid depth z maps to 1 / (1 + z),
    /// invalid pixels to 0. Used as the image stand-in for feature losses
    /// when no photometric channel exists.
    pub fn from_depth(depth: &DepthMap) -> GrayImage {
        let data = depth
            .data()
            .iter()
            .map(|&z| if z.is_finite() { 1.0 / (1.0 + z) } else { 0.0 })
            .collect();
        GrayImage {
            width: depth.width,
            height: depth.height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}
