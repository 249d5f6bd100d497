//! Image and volume rasters, percentile normalization, Gaussian filtering,
//! local window moments, and the IMG1 / PGM file formats.
//!
//! Every windowed operation uses half-sample mirror reflection at the
//! borders (`d c b a | a b c d | d c b a`), extended periodically so windows
//! larger than the image are still well defined. With a symmetric kernel this
//! border rule makes the filter matrix symmetric, so column sums equal row
//! sums and the global mean of the image is preserved.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// Tissue classes carried by a [`LabelMap`].
pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// A 2-D scalar raster, row-major, nominal range `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!(
                "non-finite value at index {i}"
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image::new(width, height, data)
    }

    /// Builds an image from data the caller has already validated.
    pub(crate) fn from_parts(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Applies `f` to every pixel. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub(crate) fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

/// Per-pixel tissue labels: 0 background, 1 CSF, 2 GM, 3 WM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        check_dims(width, height, labels.len())?;
        if let Some(i) = labels.iter().position(|&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::InvalidImage(format!(
                "label {} at index {i} is not a tissue class",
                labels[i]
            )));
        }
        Ok(LabelMap {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::InvalidImage(format!(
            "{width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
        )));
    }
    match width.checked_mul(height) {
        Some(n) if n == len => Ok(()),
        _ => Err(Error::InvalidImage(format!(
            "{width}x{height} raster with {len} values"
        ))),
    }
}

/// An ordered stack of equally sized slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    slices: Vec<Image>,
}

impl Volume {
    pub fn new(slices: Vec<Image>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidImage("volume needs at least one slice".into()))?;
        for s in &slices[1..] {
            first.same_dims(s)?;
        }
        Ok(Volume { slices })
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<Image> {
        self.slices
    }

    pub fn dims(&self) -> (usize, usize) {
        self.slices[0].dims()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// An ordered stack of equally sized label maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVolume {
    slices: Vec<LabelMap>,
}

impl LabelVolume {
    pub fn new(slices: Vec<LabelMap>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidImage("label volume needs at least one slice".into()))?;
        for s in &slices[1..] {
            if s.dims() != first.dims() {
                return Err(Error::DimensionMismatch {
                    left: first.dims(),
                    right: s.dims(),
                });
            }
        }
        Ok(LabelVolume { slices })
    }

    pub fn slices(&self) -> &[LabelMap] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<LabelMap> {
        self.slices
    }

    pub fn dims(&self) -> (usize, usize) {
        self.slices[0].dims()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Either kind of raster stored in an IMG1 container.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    Scalar(Volume),
    Labels(LabelVolume),
}

/// Maps any integer index onto `0..n` by half-sample mirror reflection.
#[inline]
pub(crate) fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if (0..n).contains(&i) {
        return i as usize;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Nearest-rank empirical percentile of already sorted values.
pub fn percentile_sorted(sorted: &[f64], fraction: f64) -> f64 {
    let n = sorted.len();
    let rank = (fraction * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// [`percentile_sorted`] without a full sort; reorders `values`.
fn select_percentile(values: &mut [f64], fraction: f64) -> f64 {
    let n = values.len();
    let rank = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    *values.select_nth_unstable_by(rank - 1, f64::total_cmp).1
}

/// Clamp-rescales the image so the `lo_pct` and `hi_pct` nearest-rank
/// percentiles map to 0 and 1.
pub fn normalize_percentile(img: &Image, lo_pct: f64, hi_pct: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&lo_pct) || !(0.0..=1.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::Contract(format!(
            "percentiles must satisfy 0 <= lo < hi <= 1, got {lo_pct}, {hi_pct}"
        )));
    }
    let mut scratch = img.data.clone();
    let p_lo = select_percentile(&mut scratch, lo_pct);
    let p_hi = select_percentile(&mut scratch, hi_pct);
    if p_hi <= p_lo {
        return Err(Error::Degenerate(format!(
            "percentile interval [{p_lo}, {p_hi}] has zero width"
        )));
    }
    let inv = 1.0 / (p_hi - p_lo);
    Ok(Image::from_parts(
        img.width,
        img.height,
        img.data
            .iter()
            .map(|&v| ((v - p_lo) * inv).clamp(0.0, 1.0))
            .collect(),
    ))
}

/// Above this width the discrete kernel is replaced by the sampled Gaussian;
/// the two are indistinguishable there and the Bessel series would overflow.
const DISCRETE_KERNEL_MAX_SIGMA: f64 = 8.0;

/// Symmetric Gaussian kernel with radius `ceil(3 sigma)`, normalized to sum 1.
///
/// Uses the discrete Gaussian `e^{-t} I_n(t)` with `t = sigma^2`. Unlike the
/// sampled continuous density it has variance exactly `sigma^2` and its
/// off-centre weights grow like `sigma^2 / 2`, so small widths still blur
/// measurably.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0 && sigma.is_finite());
    let radius = (3.0 * sigma).ceil() as usize;
    let mut w: Vec<f64> = if sigma > DISCRETE_KERNEL_MAX_SIGMA {
        (0..=radius)
            .map(|n| (-(n as f64).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect()
    } else {
        let t = sigma * sigma;
        (0..=radius).map(|n| scaled_bessel_i(n, t)).collect()
    };
    let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
    for v in &mut w {
        *v /= total;
    }
    let mut kernel: Vec<f64> = w[1..].iter().rev().copied().collect();
    kernel.extend_from_slice(&w);
    kernel
}

/// `e^{-t} I_n(t)` by its power series.
fn scaled_bessel_i(n: usize, t: f64) -> f64 {
    let half = 0.5 * t;
    let mut term = 1.0;
    for k in 1..=n {
        term *= half / k as f64;
    }
    let q = half * half;
    let mut sum = term;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * (k + n as f64));
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    sum * (-t).exp()
}

/// Separable convolution with a symmetric odd-length kernel, mirror borders.
pub(crate) fn convolve_separable(src: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    let mut line = Vec::with_capacity(width.max(height) + kernel.len());

    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        line.clear();
        line.extend((-radius..width as isize + radius).map(|i| row[mirror_index(i, width)]));
        let out = &mut tmp[y * width..(y + 1) * width];
        for (x, o) in out.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .zip(&line[x..x + kernel.len()])
                .map(|(k, v)| k * v)
                .sum();
        }
    }

    // Vertical pass row by row, taps accumulated in kernel order.
    let mut dst = vec![0.0; src.len()];
    for y in 0..height {
        let out = &mut dst[y * width..(y + 1) * width];
        for (j, &k) in kernel.iter().enumerate() {
            let sy = mirror_index(y as isize + j as isize - radius, height);
            for (o, v) in out.iter_mut().zip(&tmp[sy * width..(sy + 1) * width]) {
                *o += k * v;
            }
        }
    }
    dst
}

/// Separable Gaussian blur; `sigma = 0` returns an exact copy.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Contract(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    Ok(Image::from_parts(
        img.width,
        img.height,
        convolve_separable(&img.data, img.width, img.height, &kernel),
    ))
}

/// Mean over the `(2r+1)^2` box around every pixel, mirror borders.
pub(crate) fn box_mean(src: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    let span = 2 * radius + 1;
    let ones = vec![1.0; span];
    let sums = convolve_separable(src, width, height, &ones);
    let norm = 1.0 / (span * span) as f64;
    sums.into_iter().map(|s| s * norm).collect()
}

/// Box-window mean and population standard deviation, mirror borders.
pub fn local_moments(img: &Image, radius: usize) -> Result<(Image, Image)> {
    if radius < 1 {
        return Err(Error::Contract("window radius must be >= 1".into()));
    }
    let (mean, std) = local_moments_raw(&img.data, img.width, img.height, radius);
    Ok((
        Image::from_parts(img.width, img.height, mean),
        Image::from_parts(img.width, img.height, std),
    ))
}

pub(crate) fn local_moments_raw(
    src: &[f64],
    width: usize,
    height: usize,
    radius: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mean = box_mean(src, width, height, radius);
    let sq: Vec<f64> = src.iter().map(|v| v * v).collect();
    let mean_sq = box_mean(&sq, width, height, radius);
    let cancellation = 16.0 * (2 * radius + 1) as f64 * f64::EPSILON;
    let std = mean
        .iter()
        .zip(&mean_sq)
        .map(|(m, m2)| {
            let var = m2 - m * m;
            // Variances below the rounding noise of the raw moments are zero.
            if var <= cancellation * m2 {
                0.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    (mean, std)
}

const MAGIC: &[u8; 4] = b"IMG1";
const HEADER_LEN: usize = 17;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

fn header(width: usize, height: usize, slices: usize, dtype: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    for v in [width, height, slices] {
        out.extend_from_slice(&u32::try_from(v).expect("dimension fits u32").to_le_bytes());
    }
    out.push(dtype);
    out
}

/// Encodes a scalar volume as an IMG1 byte stream (32-bit float payload).
pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let (w, h) = vol.dims();
    let mut out = header(w, h, vol.len(), DTYPE_F32);
    out.reserve(w * h * vol.len() * 4);
    for s in vol.slices() {
        for &v in s.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_labels(vol: &LabelVolume) -> Vec<u8> {
    let (w, h) = vol.dims();
    let mut out = header(w, h, vol.len(), DTYPE_U8);
    for s in vol.slices() {
        out.extend_from_slice(s.labels());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"IMG1\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    let width = read_u32(bytes, 4) as usize;
    let height = read_u32(bytes, 8) as usize;
    let slices = read_u32(bytes, 12) as usize;
    let dtype = bytes[16];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(Error::format(16, format!("unknown dtype byte {other}"))),
    };
    if width < MIN_SIDE || height < MIN_SIDE || slices == 0 {
        return Err(Error::format(
            4,
            format!("invalid dimensions {width}x{height}x{slices}"),
        ));
    }
    let slice_len = width.checked_mul(height);
    let payload = slice_len
        .and_then(|n| n.checked_mul(slices))
        .and_then(|n| n.checked_mul(elem))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(4, format!("dimensions {width}x{height}x{slices} overflow")))?;
    let slice_len = width * height;
    if bytes.len() < payload {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: header declares {slices} slices ({payload} bytes), file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > payload {
        return Err(Error::format(payload as u64, "trailing bytes after payload"));
    }
    let body = &bytes[HEADER_LEN..];
    match dtype {
        DTYPE_F32 => {
            let mut out = Vec::with_capacity(slices);
            for s in 0..slices {
                let start = s * slice_len * 4;
                let data: Vec<f64> = body[start..start + slice_len * 4]
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect();
                if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::format(
                        (HEADER_LEN + start + 4 * i) as u64,
                        "non-finite sample",
                    ));
                }
                out.push(Image::from_parts(width, height, data));
            }
            Ok(Raster::Scalar(Volume::new(out)?))
        }
        _ => {
            let mut out = Vec::with_capacity(slices);
            for s in 0..slices {
                let start = s * slice_len;
                let labels = body[start..start + slice_len].to_vec();
                if let Some(i) = labels.iter().position(|&l| usize::from(l) >= NUM_CLASSES) {
                    return Err(Error::format(
                        (HEADER_LEN + start + i) as u64,
                        format!("label value {} out of range", labels[i]),
                    ));
                }
                out.push(LabelMap {
                    width,
                    height,
                    labels,
                });
            }
            Ok(Raster::Labels(LabelVolume::new(out)?))
        }
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

/// Reads a scalar volume; a label container is a format error.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_raster(path)? {
        Raster::Scalar(v) => Ok(v),
        Raster::Labels(_) => Err(Error::format(16, "expected scalar raster, found labels")),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_raster(path)? {
        Raster::Labels(v) => Ok(v),
        Raster::Scalar(_) => Err(Error::format(16, "expected label raster, found scalars")),
    }
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(vol))
}

pub fn write_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(vol))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Maps a value to an 8-bit grey level: `floor(255 * clamp(v) + 0.5)`.
pub fn to_grey(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_grey(v)));
    out
}

/// Writes a binary (P5) 8-bit greyscale snapshot.
pub fn export_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(img))
}
