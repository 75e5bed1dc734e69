//! Image tensors, PNG I/O, patch extraction and dihedral augmentation.
//!
//! Pixels are `f32` in row-major `(row, col, channel)` order. Values live in
//! `[0, 1]` whenever the tensor is flagged as clamped; noise-added tensors may
//! leave that range and carry `clamped == false`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    clamped: bool,
}

impl ImageTensor {
    /// Wraps raw row-major data. The clamped flag is derived from the values.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!("channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("empty image {height}x{width}")));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: data.len() });
        }
        let clamped = data.iter().all(|v| (0.0..=1.0).contains(v));
        Ok(ImageTensor { height, width, channels, data, clamped })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// True when every value is known to lie in `[0, 1]`.
    pub fn is_clamped(&self) -> bool {
        self.clamped
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    /// Row `r` as a contiguous slice of `width * channels` values.
    pub fn row(&self, r: usize) -> &[f32] {
        let stride = self.width * self.channels;
        &self.data[r * stride..(r + 1) * stride]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    /// Elementwise map; the clamped flag is recomputed from the result.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTensor {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        let clamped = data.iter().all(|v| (0.0..=1.0).contains(v));
        ImageTensor { data, clamped, ..self.clone_header() }
    }

    /// Unclamped tensor from data of this shape (noise-added intermediates).
    pub(crate) fn with_data_unclamped(&self, data: Vec<f32>) -> ImageTensor {
        debug_assert_eq!(data.len(), self.data.len());
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
            clamped: false,
        }
    }

    /// Same shape and clamped flag; `data` must be a rearrangement of ours.
    pub(crate) fn with_permuted_data(&self, data: Vec<f32>) -> ImageTensor {
        debug_assert_eq!(data.len(), self.data.len());
        ImageTensor { data, ..self.clone_header() }
    }

    pub fn clamp01(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            clamped: true,
        }
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {height}x{width} at ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = self.index(r, col, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(ImageTensor { height, width, channels: self.channels, data, clamped: self.clamped })
    }

    /// Converts between gray and RGB. Gray to RGB replicates; RGB to gray uses
    /// BT.601 luma weights.
    pub fn to_channels(&self, channels: usize) -> Result<ImageTensor> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                Ok(ImageTensor { channels: 3, data, ..self.clone_header() })
            }
            (3, 1) => {
                let data = self.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect::<Vec<_>>();
                let clamped = data.iter().all(|v| (0.0..=1.0).contains(v));
                Ok(ImageTensor { channels: 1, data, clamped, ..self.clone_header() })
            }
            (a, b) => Err(Error::ShapeMismatch(format!("cannot convert {a} channels to {b}"))),
        }
    }

    fn clone_header(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: Vec::new(),
            clamped: self.clamped,
        }
    }

    /// Extracts one channel as a gray image.
    pub fn channel(&self, ch: usize) -> ImageTensor {
        let data: Vec<f32> = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        ImageTensor { channels: 1, data, ..self.clone_header() }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance over all values.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }
}

pub(crate) fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Mean squared error over all elements.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Loads an 8-bit gray or RGB PNG. An alpha channel, if present, is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::UnsupportedFormat(format!("{} is not a PNG", path.display())));
    }
    let decoded = reader
        .decode()
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, decoded.into_luma8().into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, decoded.into_rgb8().into_raw()),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: only 8-bit gray/RGB PNG is supported, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let data = bytes.into_iter().map(|b| f32::from(b) / 255.0).collect();
    let mut img = ImageTensor::new(h, w, channels, data)?;
    img.clamped = true;
    Ok(img)
}

pub fn to_bytes(img: &ImageTensor) -> Vec<u8> {
    img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes an 8-bit PNG; values are clamped and rounded.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let color = if img.channels == 1 { image::ColorType::L8 } else { image::ColorType::Rgb8 };
    image::save_buffer_with_format(
        path,
        &to_bytes(img),
        img.width as u32,
        img.height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::UnsupportedFormat(other.to_string()),
    })
}

/// Sorted list of `*.png` files in a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(files)
}

/// Loads every PNG in `dir` (sorted by file name), converted to `channels`.
pub fn load_dir(dir: &Path, channels: usize) -> Result<Vec<(String, ImageTensor)>> {
    list_pngs(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_image(&p)?.to_channels(channels)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSource {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patch_size: usize,
    channels: usize,
    patches: Vec<ImageTensor>,
    sources: Vec<PatchSource>,
}

impl PatchSet {
    pub fn empty(patch_size: usize, channels: usize) -> Self {
        PatchSet { patch_size, channels, patches: Vec::new(), sources: Vec::new() }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[ImageTensor] {
        &self.patches
    }

    pub fn sources(&self) -> &[PatchSource] {
        &self.sources
    }

    pub fn get(&self, i: usize) -> &ImageTensor {
        &self.patches[i]
    }

    pub fn push(&mut self, patch: ImageTensor, source: PatchSource) -> Result<()> {
        if patch.height != self.patch_size || patch.width != self.patch_size || patch.channels != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "patch {:?} does not fit set of {}x{}x{}",
                patch.dims(),
                self.patch_size,
                self.patch_size,
                self.channels
            )));
        }
        self.patches.push(patch);
        self.sources.push(source);
        Ok(())
    }

    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        for (p, s) in other.patches.into_iter().zip(other.sources) {
            self.push(p, s)?;
        }
        Ok(())
    }
}

/// All `patch_size` patches on the `stride` grid, in an rng-shuffled order.
pub fn extract_patches(
    img: &ImageTensor,
    image_id: usize,
    patch_size: usize,
    stride: usize,
    rng: &mut RngStream,
) -> Result<PatchSet> {
    if patch_size == 0 || patch_size > img.height || patch_size > img.width {
        return Err(Error::PatchTooLarge { patch: patch_size, height: img.height, width: img.width });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let mut offsets: Vec<(usize, usize)> = (0..=img.height - patch_size)
        .step_by(stride)
        .flat_map(|r| (0..=img.width - patch_size).step_by(stride).map(move |c| (r, c)))
        .collect();
    offsets.shuffle(rng);
    let mut set = PatchSet::empty(patch_size, img.channels);
    for (row, col) in offsets {
        set.push(img.crop(row, col, patch_size, patch_size)?, PatchSource { image: image_id, row, col })?;
    }
    Ok(set)
}

/// The eight symmetries of the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    /// Clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipHorizontal,
        Dihedral::FlipVertical,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    /// Source coordinate that lands at `(r, c)` in an `n`x`n` output.
    fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Dihedral::Identity => (r, c),
            Dihedral::Rot90 => (m - c, r),
            Dihedral::Rot180 => (m - r, m - c),
            Dihedral::Rot270 => (c, m - r),
            Dihedral::FlipHorizontal => (r, m - c),
            Dihedral::FlipVertical => (m - r, c),
            Dihedral::Transpose => (c, r),
            Dihedral::AntiTranspose => (m - c, m - r),
        }
    }

    pub fn apply(self, patch: &ImageTensor) -> Result<ImageTensor> {
        if patch.height != patch.width {
            return Err(Error::NonSquarePatch { height: patch.height, width: patch.width });
        }
        let n = patch.height;
        let ch = patch.channels;
        let mut data = Vec::with_capacity(patch.len());
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = self.source(r, c, n);
                let start = patch.index(sr, sc, 0);
                data.extend_from_slice(&patch.data[start..start + ch]);
            }
        }
        Ok(ImageTensor { data, ..patch.clone_header() })
    }
}

/// Applies a uniformly chosen dihedral transform.
pub fn augment(patch: &ImageTensor, rng: &mut RngStream) -> Result<ImageTensor> {
    if patch.height != patch.width {
        return Err(Error::NonSquarePatch { height: patch.height, width: patch.width });
    }
    let t = Dihedral::ALL[rng.random_range(0..Dihedral::ALL.len())];
    t.apply(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    fn ramp(h: usize, w: usize, c: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, c, |r, col, ch| ((r * w + col) * c + ch) as f32 / (h * w * c) as f32).unwrap()
    }

    #[test]
    fn gray_png_bytes_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::save_buffer(&path, &[0, 255, 128, 64], 2, 2, image::ColorType::L8).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.dims(), (2, 2, 1));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!(img.is_clamped());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_image(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert!(matches!(err, Error::FileNotFound(_)));
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(2, 2, vec![0, 1000, 40000, 65535]).unwrap();
        buf.save(&path).unwrap();
        assert!(matches!(load_image(&path).unwrap_err(), Error::UnsupportedFormat(_)));
    }

    #[test]
    fn non_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fake.png");
        std::fs::write(&path, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&path).unwrap_err(), Error::UnsupportedFormat(_)));
    }

    #[test]
    fn save_then_load_round_trips_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let img = ImageTensor::from_fn(5, 7, 3, |r, c, ch| ((r * 31 + c * 7 + ch * 50) % 256) as f32 / 255.0).unwrap();
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn patch_grid_counts() {
        let mut rng = RngStream::new(1, StreamId::BatchOrder);
        assert_eq!(extract_patches(&ramp(80, 80, 1), 0, 40, 40, &mut rng).unwrap().len(), 4);
        let whole = ramp(40, 40, 3);
        let one = extract_patches(&whole, 0, 40, 40, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.get(0), &whole);
    }

    #[test]
    fn patch_count_matches_offset_enumeration() {
        // oracle: enumerate offsets explicitly
        let (size, patch, stride) = (100usize, 40usize, 20usize);
        let mut count = 0;
        for r in 0..size {
            for c in 0..size {
                if r % stride == 0 && c % stride == 0 && r + patch <= size && c + patch <= size {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 16);
        let mut rng = RngStream::new(1, StreamId::BatchOrder);
        assert_eq!(extract_patches(&ramp(size, size, 1), 0, patch, stride, &mut rng).unwrap().len(), count);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let mut rng = RngStream::new(1, StreamId::BatchOrder);
        let err = extract_patches(&ramp(30, 50, 1), 0, 40, 40, &mut rng).unwrap_err();
        assert!(matches!(err, Error::PatchTooLarge { .. }));
    }

    #[test]
    fn patches_reassemble_covered_region() {
        let img = ramp(90, 70, 3);
        let mut rng = RngStream::new(9, StreamId::BatchOrder);
        let set = extract_patches(&img, 4, 20, 20, &mut rng).unwrap();
        let mut canvas = vec![f32::NAN; img.len()];
        for (p, s) in set.patches().iter().zip(set.sources()) {
            assert_eq!(s.image, 4);
            for r in 0..20 {
                for c in 0..20 {
                    for ch in 0..3 {
                        canvas[img.index(s.row + r, s.col + c, ch)] = p.get(r, c, ch);
                    }
                }
            }
        }
        for r in 0..80 {
            for c in 0..60 {
                for ch in 0..3 {
                    assert_eq!(canvas[img.index(r, c, ch)], img.get(r, c, ch));
                }
            }
        }
    }

    #[test]
    fn shuffle_is_reproducible() {
        let img = ramp(100, 100, 1);
        let a = extract_patches(&img, 0, 20, 20, &mut RngStream::new(5, StreamId::BatchOrder)).unwrap();
        let b = extract_patches(&img, 0, 20, 20, &mut RngStream::new(5, StreamId::BatchOrder)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quarter_turn_matches_definition() {
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let p = ImageTensor::new(2, 2, 1, vec![a, b, c, d]).unwrap();
        assert_eq!(Dihedral::Rot90.apply(&p).unwrap().data(), &[c, a, d, b]);
        assert_eq!(Dihedral::Identity.apply(&p).unwrap(), p);
    }

    #[test]
    fn reflections_are_involutions() {
        let p = ramp(5, 5, 3);
        for t in [Dihedral::FlipHorizontal, Dihedral::FlipVertical, Dihedral::Transpose, Dihedral::AntiTranspose] {
            assert_eq!(t.apply(&t.apply(&p).unwrap()).unwrap(), p, "{t:?}");
        }
        let r = Dihedral::Rot90;
        let four = r.apply(&r.apply(&r.apply(&r.apply(&p).unwrap()).unwrap()).unwrap()).unwrap();
        assert_eq!(four, p);
    }

    #[test]
    fn all_eight_transforms_are_distinct() {
        let p = ramp(3, 3, 1);
        let outs: Vec<_> = Dihedral::ALL.iter().map(|t| t.apply(&p).unwrap()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn augment_needs_square() {
        let mut rng = RngStream::new(1, StreamId::Augment);
        assert!(matches!(augment(&ramp(3, 4, 1), &mut rng).unwrap_err(), Error::NonSquarePatch { .. }));
    }

    #[test]
    fn channel_conversion() {
        let g = ramp(2, 2, 1);
        let rgb = g.to_channels(3).unwrap();
        assert_eq!(rgb.get(1, 1, 2), g.get(1, 1, 0));
        let back = rgb.to_channels(1).unwrap();
        for (x, y) in back.data().iter().zip(g.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn augment_permutes_values(seed in 0u64..500, n in 1usize..7) {
            let p = ImageTensor::from_fn(n, n, 3, |r, c, ch| ((r * 13 + c * 7 + ch * 3) % 17) as f32 / 17.0).unwrap();
            let mut rng = RngStream::new(seed, StreamId::Augment);
            let out = augment(&p, &mut rng).unwrap();
            let mut a: Vec<f32> = p.data().to_vec();
            let mut b: Vec<f32> = out.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            proptest::prop_assert_eq!(a, b);
        }
    }
}
