//! Grayscale spectrogram images, the high-energy core mask and mask algebra.
//!
//! Louder cells map to *smaller* pixel values. Images are stored as
//! `n_mels x n_frames` arrays with row 0 the lowest band; PNG files flip this
//! so the highest band is the top row.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{amp_to_db, db_to_amp, floor_db, GridAxis, SpectrogramGrid};

pub const SILENT_PIXEL: u8 = 255;
pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 80.0;
pub const DEFAULT_CORE_FRACTION: f64 = 0.15;
pub const CORE_FRACTION_RANGE: (f64, f64) = (0.05, 0.5);

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {left:?} vs {right:?} (frames x bands)")]
    Dimensions {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("core fraction {0} outside [0.05, 0.5]")]
    CoreFraction(f64),
    #[error("dynamic range must be positive, got {0}")]
    DynamicRange(f64),
    #[error("expected a mel-band grid")]
    NotMel,
    #[error("cannot write {path}: {detail}")]
    Write { path: PathBuf, detail: String },
    #[error("cannot read {path}: {detail}")]
    Read { path: PathBuf, detail: String },
}

/// dB-to-pixel mapping: `db_max` maps to pixel 0 and `db_max - dynamic_range`
/// (or anything quieter) to pixel 255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMapping {
    pub db_max: f64,
    pub dynamic_range: f64,
}

impl Default for ImageMapping {
    fn default() -> Self {
        Self {
            db_max: 0.0,
            dynamic_range: DEFAULT_DYNAMIC_RANGE_DB,
        }
    }
}

impl ImageMapping {
    pub fn new(db_max: f64, dynamic_range: f64) -> Result<Self, ImageError> {
        if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
            return Err(ImageError::DynamicRange(dynamic_range));
        }
        Ok(Self { db_max, dynamic_range })
    }

    /// Per-clip normalization: the loudest cell maps to pixel 0.
    pub fn for_grid(grid: &SpectrogramGrid, dynamic_range: f64) -> Result<Self, ImageError> {
        Self::new(amp_to_db(grid.max_value()), dynamic_range)
    }

    pub fn pixel(&self, amplitude: f64) -> u8 {
        let n = ((self.db_max - amp_to_db(amplitude)) / self.dynamic_range).clamp(0.0, 1.0);
        (255.0 * n).round() as u8
    }

    pub fn amplitude(&self, pixel: u8) -> f64 {
        let d = self.db_max - self.dynamic_range * (pixel as f64 / 255.0);
        if d < floor_db() {
            0.0
        } else {
            db_to_amp(d)
        }
    }
}

/// 8-bit grayscale mel spectrogram. Pixels are indexed `[band, frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecImage {
    pixels: Array2<u8>,
    mapping: ImageMapping,
}

impl SpecImage {
    pub fn new(pixels: Array2<u8>, mapping: ImageMapping) -> Self {
        Self { pixels, mapping }
    }

    pub fn filled(n_mels: usize, n_frames: usize, value: u8, mapping: ImageMapping) -> Self {
        Self::new(Array2::from_elem((n_mels, n_frames), value), mapping)
    }

    pub fn pixels(&self) -> &Array2<u8> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array2<u8> {
        &mut self.pixels
    }

    pub fn mapping(&self) -> ImageMapping {
        self.mapping
    }

    /// Image width in time frames.
    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Image height in mel bands.
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    /// `(frames, bands)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        write_gray_png(&self.pixels, path.as_ref())
    }

    /// Loads a grayscale PNG and attaches `mapping` (PNG carries no mapping).
    pub fn read_png(path: impl AsRef<Path>, mapping: ImageMapping) -> Result<Self, ImageError> {
        Ok(Self::new(read_gray_png(path.as_ref())?, mapping))
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), ImageError> {
    if a != b {
        return Err(ImageError::Dimensions { left: a, right: b });
    }
    Ok(())
}

pub fn mel_to_image(grid: &SpectrogramGrid, mapping: ImageMapping) -> Result<SpecImage, ImageError> {
    if grid.axis() != GridAxis::MelBands {
        return Err(ImageError::NotMel);
    }
    Ok(SpecImage::new(grid.values().mapv(|v| mapping.pixel(v)), mapping))
}

pub fn image_to_mel(img: &SpecImage) -> SpectrogramGrid {
    let mapping = img.mapping;
    SpectrogramGrid::new(img.pixels.mapv(|p| mapping.amplitude(p)), GridAxis::MelBands)
        .expect("decoded amplitudes are finite and nonnegative")
}

/// Which side of a [`BinaryMask`] is retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    Core,
    Complement,
}

/// Core-region mask: `true` marks the high-energy core.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    cells: Array2<bool>,
    core_fraction: f64,
}

impl BinaryMask {
    /// Builds a mask from explicit cells; the fraction is derived from the count.
    pub fn from_cells(cells: Array2<bool>) -> Self {
        let total = cells.len().max(1);
        let count = cells.iter().filter(|&&c| c).count();
        Self {
            cells,
            core_fraction: count as f64 / total as f64,
        }
    }

    pub fn cells(&self) -> &Array2<bool> {
        &self.cells
    }

    pub fn core_fraction(&self) -> f64 {
        self.core_fraction
    }

    pub fn core_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cells.ncols(), self.cells.nrows())
    }

    pub fn is_core(&self, band: usize, frame: usize) -> bool {
        self.cells[[band, frame]]
    }

    /// Cells retained under `keep`.
    pub fn keep_region(&self, keep: Keep) -> KeepRegion {
        KeepRegion(match keep {
            Keep::Core => self.cells.clone(),
            Keep::Complement => self.cells.mapv(|c| !c),
        })
    }

    /// Grows the core by `radius` cells in every direction (8-connected).
    pub fn dilated(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (rows, cols) = self.cells.dim();
        let mut out = Array2::from_elem((rows, cols), false);
        for ((r, c), &on) in self.cells.indexed_iter() {
            if !on {
                continue;
            }
            for rr in r.saturating_sub(radius)..(r + radius + 1).min(rows) {
                for cc in c.saturating_sub(radius)..(c + radius + 1).min(cols) {
                    out[[rr, cc]] = true;
                }
            }
        }
        Self::from_cells(out)
    }

    /// 3x3 majority vote (cells outside the image count as non-core).
    pub fn majority_smoothed(&self) -> Self {
        let (rows, cols) = self.cells.dim();
        let out = Array2::from_shape_fn((rows, cols), |(r, c)| {
            let mut votes = 0;
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                    votes += usize::from(self.cells[[rr, cc]]);
                }
            }
            votes >= 5
        });
        Self::from_cells(out)
    }

    /// Mask PNG with 255 on the retained side and 0 elsewhere.
    pub fn write_png(&self, path: impl AsRef<Path>, keep: Keep) -> Result<(), ImageError> {
        self.keep_region(keep).write_png(path)
    }
}

/// Arbitrary retained region (`true` = keep); produced from a mask side,
/// possibly dilated, and rendered as 255 = keep, 0 = generate.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepRegion(pub Array2<bool>);

impl KeepRegion {
    pub fn all(n_mels: usize, n_frames: usize, keep: bool) -> Self {
        Self(Array2::from_elem((n_mels, n_frames), keep))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.ncols(), self.0.nrows())
    }

    pub fn kept_count(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        write_gray_png(&self.0.mapv(|k| if k { 255 } else { 0 }), path.as_ref())
    }

    /// Pixels >= 128 are read as keep.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Ok(Self(read_gray_png(path.as_ref())?.mapv(|p| p >= 128)))
    }
}

/// Number of core cells for a given image size and fraction.
pub fn core_cell_count(n_cells: usize, core_fraction: f64) -> usize {
    (core_fraction * n_cells as f64).round() as usize
}

/// Visits cells frame by frame, lowest band first.
pub fn scan_order(n_mels: usize, n_frames: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_frames).flat_map(move |t| (0..n_mels).map(move |m| (m, t)))
}

/// Selects exactly `round(core_fraction * W * H)` cells with the smallest
/// pixel values. Cells at the threshold value are taken in scan order until
/// the count is reached.
pub fn extract_core_mask(img: &SpecImage, core_fraction: f64) -> Result<BinaryMask, ImageError> {
    let (lo, hi) = CORE_FRACTION_RANGE;
    if !(lo..=hi).contains(&core_fraction) {
        return Err(ImageError::CoreFraction(core_fraction));
    }
    let (n_mels, n_frames) = img.pixels.dim();
    let k = core_cell_count(img.pixels.len(), core_fraction);
    let mut histogram = [0usize; 256];
    for &p in img.pixels.iter() {
        histogram[p as usize] += 1;
    }
    // Smallest threshold value whose cumulative count reaches k.
    let mut below = 0;
    let mut threshold = 0u8;
    for (value, &count) in histogram.iter().enumerate() {
        if below + count >= k {
            threshold = value as u8;
            break;
        }
        below += count;
    }
    let mut ties_left = k - below;
    let mut cells = Array2::from_elem((n_mels, n_frames), false);
    for (m, t) in scan_order(n_mels, n_frames) {
        let p = img.pixels[[m, t]];
        if p < threshold {
            cells[[m, t]] = true;
        } else if p == threshold && ties_left > 0 {
            cells[[m, t]] = true;
            ties_left -= 1;
        }
    }
    Ok(BinaryMask { cells, core_fraction })
}

/// Keeps one side of the mask and fills the other with silence (255).
pub fn apply_mask(img: &SpecImage, mask: &BinaryMask, keep: Keep) -> Result<SpecImage, ImageError> {
    apply_keep(img, &mask.keep_region(keep))
}

pub fn apply_keep(img: &SpecImage, keep: &KeepRegion) -> Result<SpecImage, ImageError> {
    check_dims(img.dims(), keep.dims())?;
    let pixels = Zip::from(&img.pixels)
        .and(&keep.0)
        .map_collect(|&p, &k| if k { p } else { SILENT_PIXEL });
    Ok(SpecImage::new(pixels, img.mapping))
}

/// Takes retained cells from `original` and all others from `generated`.
/// The result carries the original's mapping.
pub fn composite(
    generated: &SpecImage,
    original: &SpecImage,
    mask: &BinaryMask,
    keep: Keep,
) -> Result<SpecImage, ImageError> {
    composite_keep(generated, original, &mask.keep_region(keep))
}

pub fn composite_keep(generated: &SpecImage, original: &SpecImage, keep: &KeepRegion) -> Result<SpecImage, ImageError> {
    check_dims(generated.dims(), original.dims())?;
    check_dims(original.dims(), keep.dims())?;
    let pixels = Zip::from(&generated.pixels)
        .and(&original.pixels)
        .and(&keep.0)
        .map_collect(|&g, &o, &k| if k { o } else { g });
    Ok(SpecImage::new(pixels, original.mapping))
}

fn write_gray_png(pixels: &Array2<u8>, path: &Path) -> Result<(), ImageError> {
    let err = |detail: String| ImageError::Write {
        path: path.to_path_buf(),
        detail,
    };
    let (rows, cols) = pixels.dim();
    let file = File::create(path).map_err(|e| err(e.to_string()))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| err(e.to_string()))?;
    // Top row of the PNG is the highest band.
    let data: Vec<u8> = (0..rows).rev().flat_map(|r| pixels.row(r).to_vec()).collect();
    writer.write_image_data(&data).map_err(|e| err(e.to_string()))?;
    writer.finish().map_err(|e| err(e.to_string()))
}

fn read_gray_png(path: &Path) -> Result<Array2<u8>, ImageError> {
    let err = |detail: String| ImageError::Read {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let (cols, rows) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(err(format!("unsupported color type {other:?}"))),
    };
    let line = info.line_size;
    // Colour inputs are reduced to their first channel.
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        buf[(rows - 1 - r) * line + c * channels]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mel(values: Array2<f64>) -> SpectrogramGrid {
        SpectrogramGrid::new(values, GridAxis::MelBands).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize, levels: u8) -> SpecImage {
        SpecImage::new(
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0..=levels)),
            ImageMapping::default(),
        )
    }

    #[test]
    fn mapping_endpoints() {
        let map = ImageMapping::new(-6.0, 80.0).unwrap();
        assert_eq!(map.pixel(db_to_amp(-6.0)), 0);
        assert_eq!(map.pixel(db_to_amp(-86.0)), 255);
        assert_eq!(map.pixel(db_to_amp(-120.0)), 255);
        assert_eq!(map.pixel(10.0), 0);
        assert_abs_diff_eq!(map.amplitude(0), db_to_amp(-6.0), epsilon = 1e-15);
        assert_abs_diff_eq!(map.amplitude(255), db_to_amp(-86.0), epsilon = 1e-15);
        assert!(ImageMapping::new(0.0, 0.0).is_err());
    }

    #[test]
    fn minus_forty_db_maps_to_128() {
        let map = ImageMapping::new(0.0, 80.0).unwrap();
        assert_eq!(map.pixel(10f64.powf(-40.0 / 20.0)), 128);
    }

    #[test]
    fn below_floor_decodes_to_zero() {
        let map = ImageMapping::new(-40.0, 80.0).unwrap();
        assert_eq!(map.amplitude(255), 0.0);
        let img = SpecImage::filled(4, 3, 255, map);
        assert!(image_to_mel(&img).values().iter().all(|&v| v == 0.0));
        let loud = ImageMapping::new(0.0, 80.0).unwrap();
        let img = SpecImage::filled(4, 3, 255, loud);
        assert!(image_to_mel(&img)
            .values()
            .iter()
            .all(|&v| (v - db_to_amp(-80.0)).abs() < 1e-15));
    }

    #[test]
    fn mel_to_image_requires_mel_axis() {
        let g = SpectrogramGrid::zeros(GridAxis::StftBins, 3, 3);
        assert!(matches!(
            mel_to_image(&g, ImageMapping::default()),
            Err(ImageError::NotMel)
        ));
    }

    #[test]
    fn constant_image_takes_first_cells_in_scan_order() {
        let img = SpecImage::filled(10, 20, 77, ImageMapping::default());
        let mask = extract_core_mask(&img, 0.15).unwrap();
        assert_eq!(mask.core_count(), 30);
        // 30 cells = frames 0..3 completely (10 bands each).
        for (i, (m, t)) in scan_order(10, 20).enumerate() {
            assert_eq!(mask.is_core(m, t), i < 30, "cell ({m},{t})");
        }
    }

    #[test]
    fn separated_values_select_exactly_the_zero_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, cols) = (16, 25);
        let n = rows * cols;
        let k = 60;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let mut px = Array2::from_elem((rows, cols), 255u8);
        for &i in &idx[..k] {
            px[[i / cols, i % cols]] = 0;
        }
        let img = SpecImage::new(px.clone(), ImageMapping::default());
        let mask = extract_core_mask(&img, k as f64 / n as f64).unwrap();
        for ((r, c), &on) in mask.cells().indexed_iter() {
            assert_eq!(on, px[[r, c]] == 0);
        }
    }

    #[test]
    fn core_fraction_bounds() {
        let img = SpecImage::filled(4, 4, 0, ImageMapping::default());
        assert!(extract_core_mask(&img, 0.04).is_err());
        assert!(extract_core_mask(&img, 0.51).is_err());
        assert!(extract_core_mask(&img, 0.05).is_ok());
        assert!(extract_core_mask(&img, 0.5).is_ok());
    }

    /// Sort-based oracle: stable sort by (pixel, scan index), take k.
    fn oracle_mask(img: &SpecImage, fraction: f64) -> Array2<bool> {
        let (rows, cols) = img.pixels().dim();
        let mut order: Vec<(u8, usize, (usize, usize))> = scan_order(rows, cols)
            .enumerate()
            .map(|(i, (m, t))| (img.pixels()[[m, t]], i, (m, t)))
            .collect();
        order.sort();
        let k = core_cell_count(rows * cols, fraction);
        let mut cells = Array2::from_elem((rows, cols), false);
        for &(_, _, (m, t)) in &order[..k] {
            cells[[m, t]] = true;
        }
        cells
    }

    #[test]
    fn matches_sort_oracle_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let rows = rng.gen_range(1..40);
            let cols = rng.gen_range(1..40);
            let levels = if trial % 2 == 0 { 255 } else { 6 };
            let img = random_image(&mut rng, rows, cols, levels);
            for fraction in [0.05, 0.1, 0.15, 0.2, 0.33, 0.5] {
                let mask = extract_core_mask(&img, fraction).unwrap();
                assert_eq!(mask.core_count(), core_cell_count(rows * cols, fraction));
                assert_eq!(mask.cells(), &oracle_mask(&img, fraction));
            }
        }
    }

    #[test]
    fn apply_mask_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 8, 12, 255);
        let mask = extract_core_mask(&img, 0.2).unwrap();
        let core = apply_mask(&img, &mask, Keep::Core).unwrap();
        let rest = apply_mask(&img, &mask, Keep::Complement).unwrap();
        let rebuilt = composite(&rest, &core, &mask, Keep::Core).unwrap();
        assert_eq!(rebuilt, img);

        let all = BinaryMask::from_cells(Array2::from_elem((8, 12), true));
        assert_eq!(apply_mask(&img, &all, Keep::Core).unwrap(), img);
        let none = BinaryMask::from_cells(Array2::from_elem((8, 12), false));
        let blank = apply_mask(&img, &none, Keep::Core).unwrap();
        assert!(blank.pixels().iter().all(|&p| p == 255));

        let wrong = BinaryMask::from_cells(Array2::from_elem((8, 11), false));
        assert!(matches!(
            apply_mask(&img, &wrong, Keep::Core),
            Err(ImageError::Dimensions { .. })
        ));
    }

    #[test]
    fn composite_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let orig = random_image(&mut rng, 8, 12, 255);
        let gen = random_image(&mut rng, 8, 12, 255);
        let mask = extract_core_mask(&orig, 0.15).unwrap();
        assert_eq!(composite(&orig, &orig, &mask, Keep::Core).unwrap(), orig);
        let c = composite(&gen, &orig, &mask, Keep::Core).unwrap();
        for ((r, t), &on) in mask.cells().indexed_iter() {
            let expected = if on {
                orig.pixels()[[r, t]]
            } else {
                gen.pixels()[[r, t]]
            };
            assert_eq!(c.pixels()[[r, t]], expected);
        }
        let again = composite(&c, &orig, &mask, Keep::Core).unwrap();
        assert_eq!(again, c);
        let short = SpecImage::filled(8, 11, 0, ImageMapping::default());
        assert!(composite(&short, &orig, &mask, Keep::Core).is_err());
    }

    #[test]
    fn dilation_and_smoothing() {
        let mut cells = Array2::from_elem((7, 7), false);
        cells[[3, 3]] = true;
        let m = BinaryMask::from_cells(cells);
        assert_eq!(m.dilated(1).core_count(), 9);
        assert_eq!(m.dilated(0), m);
        // A lone cell loses the vote, a solid 3x3 block keeps its centre.
        assert_eq!(m.majority_smoothed().core_count(), 0);
        let block = m.dilated(1);
        let smoothed = block.majority_smoothed();
        assert!(smoothed.is_core(3, 3));
        assert!(!smoothed.is_core(0, 0));
    }

    #[test]
    fn png_round_trip_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut px = Array2::from_elem((3, 5), 200u8);
        px[[2, 0]] = 7; // highest band, first frame
        let img = SpecImage::new(px, ImageMapping::default());
        img.write_png(&path).unwrap();
        let back = SpecImage::read_png(&path, ImageMapping::default()).unwrap();
        assert_eq!(back, img);

        let file = File::open(&path).unwrap();
        let mut reader = png::Decoder::new(file).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (5, 3));
        assert_eq!(info.color_type, png::ColorType::Grayscale);
        assert_eq!(buf[0], 7, "top-left pixel is the highest band");
    }

    #[test]
    fn mask_png_uses_255_for_keep() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut cells = Array2::from_elem((2, 2), false);
        cells[[0, 1]] = true;
        let mask = BinaryMask::from_cells(cells);
        mask.write_png(&path, Keep::Core).unwrap();
        let raw = read_gray_png(&path).unwrap();
        assert_eq!(raw[[0, 1]], 255);
        assert_eq!(raw.iter().filter(|&&p| p == 0).count(), 3);
        let keep = KeepRegion::read_png(&path).unwrap();
        assert_eq!(keep, mask.keep_region(Keep::Core));
    }

    proptest! {
        #[test]
        fn round_trip_db_error_bounded(
            db in proptest::collection::vec(-80.0f64..0.0, 1..200),
            range in 20.0f64..120.0,
        ) {
            let n = db.len();
            let grid = mel(Array2::from_shape_vec((1, n), db.iter().map(|&d| db_to_amp(d)).collect()).unwrap());
            let map = ImageMapping::new(0.0, range).unwrap();
            let back = image_to_mel(&mel_to_image(&grid, map).unwrap());
            for (&d, &v) in db.iter().zip(back.values().iter()) {
                if d >= -range {
                    prop_assert!((amp_to_db(v) - d).abs() <= range / 255.0 + 1e-9);
                }
            }
        }

        #[test]
        fn mapping_is_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0, db_max in -40.0f64..20.0) {
            let map = ImageMapping::new(db_max, 80.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(map.pixel(hi) <= map.pixel(lo));
        }

        #[test]
        fn swapping_tied_cells_keeps_count(seed in 0u64..1000, fraction in 0.05f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 9, 13, 4);
            let base = extract_core_mask(&img, fraction).unwrap();
            let (a, b) = ((rng.gen_range(0..9), rng.gen_range(0..13)), (rng.gen_range(0..9), rng.gen_range(0..13)));
            let mut px = img.pixels().clone();
            px.swap([a.0, a.1], [b.0, b.1]);
            let swapped = extract_core_mask(&SpecImage::new(px, img.mapping()), fraction).unwrap();
            prop_assert_eq!(base.core_count(), swapped.core_count());
        }
    }
}
