//! Grid LUT ingestion and emission (`.cube`), Hald rasters, the
//! train/test lattice split, and PNG image I/O.

use crate::color::Rgb;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CubeError {
    #[error("line {line}: missing LUT_3D_SIZE before table data")]
    MissingSize { line: usize },
    #[error("line {line}: invalid LUT_3D_SIZE {value:?} (must be an integer >= 2)")]
    BadSize { line: usize, value: String },
    #[error("line {line}: non-numeric entry {token:?}")]
    NonNumeric { line: usize, token: String },
    #[error("line {line}: expected 3 values, found {found}")]
    WrongArity { line: usize, found: usize },
    #[error("line {line}: expected {expected} entries, found {found}")]
    EntryCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: DOMAIN_MIN must be below DOMAIN_MAX on every channel")]
    BadDomain { line: usize },
    #[error("line {line}: 1D LUTs are not supported")]
    Unsupported1d { line: usize },
    #[error("input is not valid UTF-8")]
    Utf8,
}

/// A regular 3D grid LUT with `size³` entries in red-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeLut {
    pub size: usize,
    pub entries: Vec<Rgb>,
    pub domain_min: Rgb,
    pub domain_max: Rgb,
    pub title: Option<String>,
}

impl CubeLut {
    /// Builds a LUT by sampling `f` at every lattice point of `[0,1]³`.
    pub fn from_fn(size: usize, mut f: impl FnMut(Rgb) -> Rgb) -> Self {
        assert!(size >= 2, "cube size must be at least 2");
        let step = 1.0 / (size - 1) as f64;
        let mut entries = Vec::with_capacity(size * size * size);
        for b in 0..size {
            for g in 0..size {
                for r in 0..size {
                    entries.push(f(Rgb::new(
                        r as f64 * step,
                        g as f64 * step,
                        b as f64 * step,
                    )));
                }
            }
        }
        CubeLut {
            size,
            entries,
            domain_min: Rgb::BLACK,
            domain_max: Rgb::WHITE,
            title: None,
        }
    }

    pub fn identity(size: usize) -> Self {
        CubeLut::from_fn(size, |c| c)
    }

    #[inline]
    pub fn entry(&self, r: usize, g: usize, b: usize) -> Rgb {
        self.entries[(b * self.size + g) * self.size + r]
    }

    /// The input color of lattice vertex `(r, g, b)` in normalized coordinates.
    pub fn vertex(&self, r: usize, g: usize, b: usize) -> Rgb {
        let s = (self.size - 1) as f64;
        Rgb::new(r as f64 / s, g as f64 / s, b as f64 / s)
    }

    /// Trilinear interpolation at a point given in the LUT's domain.
    /// Queries outside the domain box are clamped to it first.
    pub fn trilinear_sample(&self, c: Rgb) -> Rgb {
        let (lo, hi) = (self.domain_min.to_array(), self.domain_max.to_array());
        let c = c.to_array();
        let mut n = [0.0; 3];
        for k in 0..3 {
            n[k] = (c[k] - lo[k]) / (hi[k] - lo[k]);
        }
        self.sample_normalized(Rgb::from_array(n))
    }

    /// Trilinear interpolation with the domain mapped onto `[0,1]³`.
    pub fn sample_normalized(&self, c: Rgb) -> Rgb {
        let last = self.size - 1;
        let s = last as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for (k, v) in c.to_array().into_iter().enumerate() {
            let mut v = v.clamp(0.0, 1.0) * s;
            // Snap to the vertex so lattice queries hit entries exactly.
            if (v - v.round()).abs() < 1e-9 {
                v = v.round();
            }
            let i = (v.floor() as usize).min(last - 1);
            base[k] = i;
            frac[k] = v - i as f64;
        }
        let mut out = [0.0f64; 3];
        for corner in 0..8 {
            let dr = corner & 1;
            let dg = (corner >> 1) & 1;
            let db = (corner >> 2) & 1;
            let w = (if dr == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dg == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if db == 1 { frac[2] } else { 1.0 - frac[2] });
            if w == 0.0 {
                continue;
            }
            let e = self
                .entry(base[0] + dr, base[1] + dg, base[2] + db)
                .to_array();
            for k in 0..3 {
                out[k] += w * e[k];
            }
        }
        Rgb::from_array(out)
    }
}

fn parse_triplet(line_no: usize, tokens: &[&str]) -> Result<[f64; 3], CubeError> {
    if tokens.len() != 3 {
        return Err(CubeError::WrongArity {
            line: line_no,
            found: tokens.len(),
        });
    }
    let mut v = [0.0; 3];
    for (slot, tok) in v.iter_mut().zip(tokens) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| CubeError::NonNumeric {
                line: line_no,
                token: tok.to_string(),
            })?;
    }
    Ok(v)
}

/// Parses a `.cube` file (3D subset: `TITLE`, `LUT_3D_SIZE`, `DOMAIN_MIN`,
/// `DOMAIN_MAX`, `#` comments, and red-fastest RGB triplets).
pub fn parse_cube(bytes: &[u8]) -> Result<CubeLut, CubeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| CubeError::Utf8)?;
    let mut size: Option<usize> = None;
    let mut title = None;
    let mut domain_min = [0.0; 3];
    let mut domain_max = [1.0; 3];
    let mut domain_line = 0;
    let mut entries = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "TITLE" => {
                let rest = line["TITLE".len()..].trim();
                title = Some(rest.trim_matches('"').to_string());
            }
            "LUT_3D_SIZE" => {
                let value = tokens.get(1).copied().unwrap_or("");
                let n = value
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n >= 2 && tokens.len() == 2)
                    .ok_or_else(|| CubeError::BadSize {
                        line: line_no,
                        value: value.to_string(),
                    })?;
                size = Some(n);
                entries.reserve(n * n * n);
            }
            "LUT_1D_SIZE" => return Err(CubeError::Unsupported1d { line: line_no }),
            "DOMAIN_MIN" => {
                domain_min = parse_triplet(line_no, &tokens[1..])?;
                domain_line = line_no;
            }
            "DOMAIN_MAX" => {
                domain_max = parse_triplet(line_no, &tokens[1..])?;
                domain_line = line_no;
            }
            "LUT_3D_INPUT_RANGE" => {
                let v = parse_triplet(line_no, &[tokens.get(1).copied().unwrap_or(""), "0", "0"])?;
                let w = parse_triplet(line_no, &[tokens.get(2).copied().unwrap_or(""), "0", "0"])?;
                domain_min = [v[0]; 3];
                domain_max = [w[0]; 3];
                domain_line = line_no;
            }
            _ => {
                let Some(n) = size else {
                    return Err(CubeError::MissingSize { line: line_no });
                };
                let v = parse_triplet(line_no, &tokens)?;
                if entries.len() == n * n * n {
                    return Err(CubeError::EntryCount {
                        line: line_no,
                        expected: n * n * n,
                        found: entries.len() + 1,
                    });
                }
                entries.push(Rgb::from_array(v));
            }
        }
    }

    let Some(n) = size else {
        return Err(CubeError::MissingSize {
            line: last_line.max(1),
        });
    };
    if entries.len() != n * n * n {
        return Err(CubeError::EntryCount {
            line: last_line,
            expected: n * n * n,
            found: entries.len(),
        });
    }
    if (0..3).any(|k| domain_min[k] >= domain_max[k]) {
        return Err(CubeError::BadDomain { line: domain_line });
    }
    Ok(CubeLut {
        size: n,
        entries,
        domain_min: Rgb::from_array(domain_min),
        domain_max: Rgb::from_array(domain_max),
        title,
    })
}

/// Emits a `.cube` file. Values are written as the shortest decimal that
/// round-trips through `f32`.
pub fn write_cube(lut: &CubeLut) -> Vec<u8> {
    let mut out = String::with_capacity(lut.entries.len() * 30 + 128);
    if let Some(t) = &lut.title {
        let _ = writeln!(out, "TITLE \"{}\"", t.replace('"', "'"));
    }
    let _ = writeln!(out, "LUT_3D_SIZE {}", lut.size);
    if lut.domain_min != Rgb::BLACK || lut.domain_max != Rgb::WHITE {
        let (a, b) = (lut.domain_min, lut.domain_max);
        let _ = writeln!(out, "DOMAIN_MIN {} {} {}", a.r as f32, a.g as f32, a.b as f32);
        let _ = writeln!(out, "DOMAIN_MAX {} {} {}", b.r as f32, b.g as f32, b.b as f32);
    }
    for e in &lut.entries {
        let _ = writeln!(out, "{} {} {}", e.r as f32, e.g as f32, e.b as f32);
    }
    out.into_bytes()
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("hald index {index} out of range for {q}^3 samples")]
pub struct HaldIndexError {
    pub index: usize,
    pub q: usize,
}

/// Canonical lattice color for index `k`: red varies fastest, then green,
/// then blue; components are `index / (q - 1)`.
pub fn hald_index_to_color(k: usize, q: usize) -> Result<Rgb, HaldIndexError> {
    if q < 2 || k >= q * q * q {
        return Err(HaldIndexError { index: k, q });
    }
    let s = (q - 1) as f64;
    let r = k % q;
    let g = (k / q) % q;
    let b = k / (q * q);
    Ok(Rgb::new(r as f64 / s, g as f64 / s, b as f64 / s))
}

/// A raster whose pixels enumerate a `q³` lattice in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct HaldRaster {
    pub samples_per_axis: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

/// Width for a Hald raster of `count` pixels: the largest divisor not
/// exceeding `sqrt(count)` (1024×2048 for 128³).
fn hald_width(count: usize) -> usize {
    let root = (count as f64).sqrt().floor() as usize;
    (1..=root.max(1)).rev().find(|d| count.is_multiple_of(*d)).unwrap_or(1)
}

impl HaldRaster {
    pub fn identity(q: usize) -> Self {
        let count = q * q * q;
        let pixels = (0..count)
            .map(|k| hald_index_to_color(k, q).expect("index in range"))
            .collect();
        let width = hald_width(count);
        HaldRaster {
            samples_per_axis: q,
            width,
            height: count / width,
            pixels,
        }
    }

    /// Interprets an image as a Hald raster with `q` samples per axis.
    pub fn from_image(img: &Image, q: usize) -> Option<Self> {
        (img.width * img.height == q * q * q).then(|| HaldRaster {
            samples_per_axis: q,
            width: img.width,
            height: img.height,
            pixels: img.pixels.clone(),
        })
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.clone(),
        }
    }

    /// A Hald raster shares the cube's red-fastest order, so it converts
    /// to a grid LUT of size `q` directly.
    pub fn to_cube(&self) -> CubeLut {
        CubeLut {
            size: self.samples_per_axis,
            entries: self.pixels.clone(),
            domain_min: Rgb::BLACK,
            domain_max: Rgb::WHITE,
            title: None,
        }
    }
}

/// Paired input and target colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColorPairSet {
    pub inputs: Vec<Rgb>,
    pub targets: Vec<Rgb>,
}

impl ColorPairSet {
    pub fn new(inputs: Vec<Rgb>, targets: Vec<Rgb>) -> Self {
        assert_eq!(inputs.len(), targets.len(), "pair set lengths differ");
        ColorPairSet { inputs, targets }
    }

    pub fn from_fn(inputs: Vec<Rgb>, f: impl Fn(Rgb) -> Rgb) -> Self {
        let targets = inputs.iter().map(|&c| f(c)).collect();
        ColorPairSet { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> ColorPairSet {
        ColorPairSet {
            inputs: idx.iter().map(|&i| self.inputs[i]).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Train/test split of the regular lattice with `2·q_train` codes per
/// axis: train takes the even codes (stride 2 from 0), test the rest.
/// With `q_train = 128` the lattice is the full 8-bit RGB cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticeSplit {
    pub q_train: usize,
}

pub fn build_split(q_train: usize) -> LatticeSplit {
    assert!(q_train >= 1);
    LatticeSplit { q_train }
}

impl LatticeSplit {
    pub fn codes_per_axis(&self) -> usize {
        2 * self.q_train
    }

    pub fn train_len(&self) -> usize {
        self.q_train.pow(3)
    }

    pub fn test_len(&self) -> usize {
        self.codes_per_axis().pow(3) - self.train_len()
    }

    fn code_to_color(&self, r: usize, g: usize, b: usize) -> Rgb {
        let s = (self.codes_per_axis() - 1) as f64;
        Rgb::new(r as f64 / s, g as f64 / s, b as f64 / s)
    }

    /// Integer lattice codes of the training colors, red fastest.
    pub fn train_codes(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let q = self.q_train;
        (0..q * q * q).map(move |k| [2 * (k % q), 2 * ((k / q) % q), 2 * (k / (q * q))])
    }

    /// Integer lattice codes of the held-out colors (any odd code), red fastest.
    pub fn test_codes(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let n = self.codes_per_axis();
        (0..n * n * n)
            .map(move |k| [k % n, (k / n) % n, k / (n * n)])
            .filter(|c| c.iter().any(|v| v % 2 == 1))
    }

    pub fn train_colors(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.train_codes().map(|[r, g, b]| self.code_to_color(r, g, b))
    }

    pub fn test_colors(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.test_codes().map(|[r, g, b]| self.code_to_color(r, g, b))
    }

    /// A deterministic strided subset of the test colors, at most `max` long.
    pub fn test_subset(&self, max: usize) -> Vec<Rgb> {
        let total = self.test_len();
        let stride = total.div_ceil(max.max(1)).max(1);
        self.test_colors().step_by(stride).collect()
    }
}

/// An RGB image with components in `[0,1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Self {
        assert_eq!(width * height, pixels.len());
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        Image::new(width, height, vec![c; width * height])
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// Area-average downscale so that the long edge is at most `max_edge`.
    pub fn downscale_to(&self, max_edge: usize) -> Image {
        let long = self.width.max(self.height);
        if long <= max_edge || max_edge == 0 {
            return self.clone();
        }
        let scale = long as f64 / max_edge as f64;
        let w = ((self.width as f64 / scale).round() as usize).max(1);
        let h = ((self.height as f64 / scale).round() as usize).max(1);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            let y0 = y * self.height / h;
            let y1 = ((y + 1) * self.height / h).max(y0 + 1);
            for x in 0..w {
                let x0 = x * self.width / w;
                let x1 = ((x + 1) * self.width / w).max(x0 + 1);
                let mut acc = [0.0; 3];
                for sy in y0..y1 {
                    for sx in x0..x1 {
                        let p = self.pixel(sx, sy).to_array();
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                pixels.push(Rgb::new(acc[0] / n, acc[1] / n, acc[2] / n));
            }
        }
        Image::new(w, h, pixels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("image I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

impl From<image::ImageError> for ImageError {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(io) => ImageError::Io(io),
            other => ImageError::Unsupported(other.to_string()),
        }
    }
}

fn from_dynamic(img: image::DynamicImage) -> Result<(Image, BitDepth), ImageError> {
    use image::DynamicImage as D;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        D::ImageRgb8(_) | D::ImageRgba8(_) | D::ImageLuma8(_) | D::ImageLumaA8(_) => {
            let buf = img.to_rgb8();
            let pixels = buf
                .pixels()
                .map(|p| {
                    Rgb::new(
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    )
                })
                .collect();
            Ok((Image::new(w, h, pixels), BitDepth::Eight))
        }
        D::ImageRgb16(_) | D::ImageRgba16(_) | D::ImageLuma16(_) | D::ImageLumaA16(_) => {
            let buf = img.to_rgb16();
            let pixels = buf
                .pixels()
                .map(|p| {
                    Rgb::new(
                        p[0] as f64 / 65535.0,
                        p[1] as f64 / 65535.0,
                        p[2] as f64 / 65535.0,
                    )
                })
                .collect();
            Ok((Image::new(w, h, pixels), BitDepth::Sixteen))
        }
        other => Err(ImageError::Unsupported(format!("{:?}", other.color()))),
    }
}

/// Decodes an 8- or 16-bit PNG, dividing integer codes by the maximum code.
pub fn decode_png(bytes: &[u8]) -> Result<(Image, BitDepth), ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    from_dynamic(img)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<(Image, BitDepth), ImageError> {
    let bytes = std::fs::read(path)?;
    decode_png(&bytes)
}

#[inline]
fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max + 0.5).floor()
}

/// Encodes as PNG, rounding half-up to integer codes.
pub fn encode_png(img: &Image, depth: BitDepth) -> Result<Vec<u8>, ImageError> {
    let (w, h) = (img.width as u32, img.height as u32);
    let dynimg = match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img
                .pixels
                .iter()
                .flat_map(|p| p.to_array())
                .map(|v| quantize(v, 255.0) as u8)
                .collect();
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, raw).expect("buffer matches dimensions"),
            )
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = img
                .pixels
                .iter()
                .flat_map(|p| p.to_array())
                .map(|v| quantize(v, 65535.0) as u16)
                .collect();
            image::DynamicImage::ImageRgb16(
                image::ImageBuffer::from_raw(w, h, raw).expect("buffer matches dimensions"),
            )
        }
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynimg.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_image(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<(), ImageError> {
    std::fs::write(path, encode_png(img, depth)?)?;
    Ok(())
}
