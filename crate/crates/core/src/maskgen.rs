//! Free-form stationary masks drawn as closed Bezier contours, and loading
//! of per-frame (moving) masks from disk.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MAX_POINT_NUM: usize = 12;
/// Default `max_length` as a fraction of `min(H, W)`.
pub const DEFAULT_LENGTH_FRACTION: f64 = 0.4;
/// Largest perpendicular offset of a Bezier control point, as a fraction of
/// the chord it belongs to.
pub const CONTROL_OFFSET: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub height: usize,
    pub width: usize,
    pub max_point_num: usize,
    pub max_length: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            max_point_num: DEFAULT_MAX_POINT_NUM,
            max_length: DEFAULT_LENGTH_FRACTION * height.min(width) as f64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("mask size must be nonzero".into()));
        }
        if self.max_point_num < 3 {
            return Err(Error::Config(format!(
                "max_point_num must be at least 3, got {}",
                self.max_point_num
            )));
        }
        let limit = self.height.min(self.width) as f64;
        if !(self.max_length > 0.0 && self.max_length < limit) {
            return Err(Error::Config(format!(
                "max_length must lie in (0, {limit}), got {}",
                self.max_length
            )));
        }
        Ok(())
    }

    /// Same geometry, seed for the `index`-th mask of a batch.
    pub fn derive(&self, index: u64) -> Self {
        Self {
            seed: derive_seed(self.seed, index),
            ..*self
        }
    }
}

/// splitmix64 of `base + index`, so masks generated in parallel do not
/// depend on generation order.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Row-major 0/1 mask; 1 marks a hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Thresholds 8-bit gray values: above 127 is a hole.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::shape(format!(
                "{} gray values for a {width}x{height} mask",
                gray.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: gray.iter().map(|&g| (g > 127) as u8).collect(),
        })
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn to_gray(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        io::encode_pgm(self.width, self.height, &self.to_gray())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.to_pgm()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (w, h, gray) = io::read_gray(path)?;
        Self::from_gray(w, h, &gray)
    }

    /// `[1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, self.height, self.width], |i| {
            T::from_f64(self.data[i] as f64)
        })
    }
}

/// The same mask replicated over `frames` frames, `[T, 1, H, W]`.
pub fn stationary_sequence<T: Scalar>(mask: &BinaryMask, frames: usize) -> Tensor<T> {
    let plane = mask.height * mask.width;
    Tensor::from_fn([frames, 1, mask.height, mask.width], |i| {
        T::from_f64(mask.data[i % plane] as f64)
    })
}

/// Stacks per-frame masks into `[T, 1, H, W]`.
pub fn mask_sequence<T: Scalar>(masks: &[BinaryMask]) -> Result<Tensor<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidInput("no masks".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if (m.width, m.height) != (w, h) {
            return Err(Error::shape("masks differ in size"));
        }
        data.extend(m.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new([masks.len(), 1, h, w], data)
}

type Point = (f64, f64);

/// Control polygon of the stroke: the centre, then `pointNum` vertices at
/// angles `linspace(0, 2pi, pointNum)` around it.
fn stroke_vertices(spec: &MaskSpec, rng: &mut impl Rng) -> Vec<Point> {
    let mut point_num = 0;
    while point_num < 3 {
        point_num = rng.random_range(0..=spec.max_point_num);
    }
    let origin = (
        rng.random_range(0.0..spec.width as f64),
        rng.random_range(0.0..spec.height as f64),
    );
    let mut points = vec![origin];
    for i in 0..point_num {
        let angle = 2.0 * PI * i as f64 / (point_num - 1) as f64;
        let length = rng.random_range(0.0..spec.max_length);
        points.push((
            origin.0 + angle.sin() * length,
            origin.1 + angle.cos() * length,
        ));
    }
    points
}

fn bezier(p: [Point; 4], t: f64) -> Point {
    let s = 1.0 - t;
    let (a, b, c, d) = (s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Flattened closed contour through the stroke vertices, back to the start.
/// Consecutive points are at most one pixel apart.
pub fn stroke_contour(spec: &MaskSpec) -> Result<Vec<Point>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vertices = stroke_vertices(spec, &mut rng);
    vertices.push(vertices[0]);

    let mut contour = vec![vertices[0]];
    for pair in vertices.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let o1 = rng.random_range(-CONTROL_OFFSET..=CONTROL_OFFSET);
        let o2 = rng.random_range(-CONTROL_OFFSET..=CONTROL_OFFSET);
        // Perpendicular (-dy, dx) has the chord's length, so `o * perp` is
        // an offset of `o` chord lengths.
        let c1 = (a.0 + dx / 3.0 - o1 * dy, a.1 + dy / 3.0 + o1 * dx);
        let c2 = (
            a.0 + 2.0 * dx / 3.0 - o2 * dy,
            a.1 + 2.0 * dy / 3.0 + o2 * dx,
        );
        let ctrl = [a, c1, c2, b];
        // |B'(t)| <= 3 * longest control leg bounds the chord of each step.
        let leg = dist(a, c1).max(dist(c1, c2)).max(dist(c2, b));
        let steps = (3.0 * leg).ceil().max(1.0) as usize;
        for k in 1..steps {
            contour.push(bezier(ctrl, k as f64 / steps as f64));
        }
        contour.push(b);
    }
    Ok(contour)
}

/// Outline and interior of a rasterized contour, kept apart for the
/// closure check.
#[derive(Clone, Debug)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Pixels whose closed unit square touches the contour.
    pub outline: Vec<u8>,
    /// Pixels whose centre is inside under the even-odd rule.
    pub fill: Vec<u8>,
}

impl Raster {
    pub fn mask(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .outline
                .iter()
                .zip(&self.fill)
                .map(|(a, b)| a | b)
                .collect(),
        }
    }
}

/// Liang-Barsky test of segment `p -> q` against the closed square
/// `[x, x+1] x [y, y+1]`.
fn touches_cell(p: Point, q: Point, x: f64, y: f64) -> bool {
    let (dx, dy) = (q.0 - p.0, q.1 - p.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (den, num) in [
        (-dx, p.0 - x),
        (dx, x + 1.0 - p.0),
        (-dy, p.1 - y),
        (dy, y + 1.0 - p.1),
    ] {
        if den == 0.0 {
            if num < 0.0 {
                return false;
            }
        } else {
            let r = num / den;
            if den < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    t0 <= t1
}

fn draw_outline(raster: &mut Raster, contour: &[Point]) {
    let (w, h) = (raster.width as i64, raster.height as i64);
    for seg in contour.windows(2) {
        let (p, q) = (seg[0], seg[1]);
        let x0 = (p.0.min(q.0).floor() as i64 - 1).max(0);
        let x1 = (p.0.max(q.0).floor() as i64 + 1).min(w - 1);
        let y0 = (p.1.min(q.1).floor() as i64 - 1).max(0);
        let y1 = (p.1.max(q.1).floor() as i64 + 1).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if touches_cell(p, q, x as f64, y as f64) {
                    raster.outline[(y * w + x) as usize] = 1;
                }
            }
        }
    }
}

fn fill_even_odd(raster: &mut Raster, contour: &[Point]) {
    let w = raster.width;
    let mut xs = Vec::new();
    for y in 0..raster.height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for seg in contour.windows(2) {
            let (p, q) = (seg[0], seg[1]);
            if (p.1 <= yc) != (q.1 <= yc) {
                xs.push(p.0 + (yc - p.1) * (q.0 - p.0) / (q.1 - p.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // Centres x + 0.5 in [span[0], span[1]).
            let a = (span[0] - 0.5).ceil().max(0.0) as usize;
            let b = ((span[1] - 0.5).ceil().max(0.0) as usize).min(w);
            for x in a..b {
                raster.fill[y * w + x] = 1;
            }
        }
    }
}

pub fn rasterize(width: usize, height: usize, contour: &[Point]) -> Raster {
    let mut raster = Raster {
        width,
        height,
        outline: vec![0; width * height],
        fill: vec![0; width * height],
    };
    draw_outline(&mut raster, contour);
    fill_even_odd(&mut raster, contour);
    raster
}

pub fn stationary_raster(spec: &MaskSpec) -> Result<Raster> {
    let contour = stroke_contour(spec)?;
    Ok(rasterize(spec.width, spec.height, &contour))
}

pub fn generate_stationary_mask(spec: &MaskSpec) -> Result<BinaryMask> {
    Ok(stationary_raster(spec)?.mask())
}

/// Loads one grayscale mask per frame (`*.pgm` or `*.png`, sorted by name).
/// `expected` is the frame count and `(width, height)` of the video.
pub fn load_moving_masks(
    dir: &Path,
    expected: Option<(usize, usize, usize)>,
) -> Result<Vec<BinaryMask>> {
    let mut files = io::list_files(dir, "pgm")?;
    if files.is_empty() {
        files = io::list_files(dir, "png")?;
    }
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no mask images",
            dir.display()
        )));
    }
    let masks = files
        .iter()
        .map(|f| BinaryMask::read(f))
        .collect::<Result<Vec<_>>>()?;
    if let Some((frames, width, height)) = expected {
        if masks.len() != frames {
            return Err(Error::InvalidInput(format!(
                "{}: {} masks for {frames} frames",
                dir.display(),
                masks.len()
            )));
        }
        if let Some((i, m)) = masks
            .iter()
            .enumerate()
            .find(|(_, m)| (m.width, m.height) != (width, height))
        {
            return Err(Error::InvalidInput(format!(
                "{}: mask {i} is {}x{}, frames are {width}x{height}",
                dir.display(),
                m.width,
                m.height
            )));
        }
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;

    #[test]
    fn spec_validation() {
        assert!(MaskSpec::new(240, 432, 0).validate().is_ok());
        let mut s = MaskSpec::new(240, 432, 0);
        s.max_point_num = 2;
        assert!(s.validate().is_err());
        s = MaskSpec::new(240, 432, 0);
        s.max_length = 240.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let spec = MaskSpec::new(60, 108, 42);
        let a = generate_stationary_mask(&spec).unwrap();
        let b = generate_stationary_mask(&spec).unwrap();
        assert_eq!(a.to_pgm().unwrap(), b.to_pgm().unwrap());
        assert_ne!(a, generate_stationary_mask(&spec.derive(1)).unwrap());
    }

    #[test]
    fn cell_test_is_closed() {
        // Touching a corner or an edge counts.
        assert!(touches_cell((0.0, 0.0), (1.0, 1.0), 1.0, 1.0));
        assert!(touches_cell((0.0, 2.0), (3.0, 2.0), 1.0, 1.0));
        assert!(!touches_cell((0.0, 2.1), (3.0, 2.1), 1.0, 1.0));
        assert!(touches_cell((1.5, 1.5), (1.5, 1.5), 1.0, 1.0));
    }

    #[test]
    fn square_fill_matches_hand_count() {
        // Square with corners (1,1)..(5,4): centres x+0.5 in [1,5), y+0.5 in
        // [1,4) are pixels x 1..=4, y 1..=3.
        let c = [(1.0, 1.0), (5.0, 1.0), (5.0, 4.0), (1.0, 4.0), (1.0, 1.0)];
        let r = rasterize(8, 6, &c);
        let filled: usize = r.fill.iter().map(|&v| v as usize).sum();
        assert_eq!(filled, 12);
        assert_eq!(r.fill[8 + 1], 1);
        assert_eq!(r.fill[3 * 8 + 4], 1);
        assert_eq!(r.fill[4 * 8 + 4], 0);
        assert!(!oracle::flood_leaks(8, 6, &r.outline, &r.fill));
    }

    #[test]
    fn leak_oracle_detects_gap() {
        let mut outline = vec![0u8; 25];
        let mut fill = vec![0u8; 25];
        fill[12] = 1;
        assert!(oracle::flood_leaks(5, 5, &outline, &fill));
        for i in [6, 7, 8, 11, 13, 16, 17, 18] {
            outline[i] = 1;
        }
        assert!(!oracle::flood_leaks(5, 5, &outline, &fill));
    }

    #[test]
    fn stationary_sequence_repeats_frames() {
        let m = generate_stationary_mask(&MaskSpec::new(12, 16, 3)).unwrap();
        let seq = stationary_sequence::<f32>(&m, 4);
        assert_eq!(seq.shape(), &[4, 1, 12, 16]);
        let plane = 12 * 16;
        for t in 1..4 {
            assert_eq!(
                &seq.data()[..plane],
                &seq.data()[t * plane..(t + 1) * plane]
            );
        }
    }

    fn write_masks(dir: &Path, frames: &[Vec<u8>], w: usize, h: usize) {
        for (i, g) in frames.iter().enumerate() {
            io::write_pgm(&dir.join(format!("{i:05}.pgm")), w, h, g).unwrap();
        }
    }

    #[test]
    fn load_black_white_checkerboard() {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (6, 4);
        let checker: Vec<u8> = (0..w * h)
            .map(|i| if (i % w + i / w) % 2 == 0 { 200 } else { 100 })
            .collect();
        write_masks(
            dir.path(),
            &[vec![0; w * h], vec![255; w * h], checker.clone()],
            w,
            h,
        );
        let masks = load_moving_masks(dir.path(), Some((3, w, h))).unwrap();
        assert_eq!(masks[0].area(), 0);
        assert_eq!(masks[1].area(), w * h);
        let expect: Vec<u8> = checker.iter().map(|&g| (g > 127) as u8).collect();
        assert_eq!(masks[2].data, expect);
    }

    #[test]
    fn load_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        write_masks(dir.path(), &[vec![0; 12], vec![0; 12]], 4, 3);
        assert!(load_moving_masks(dir.path(), Some((3, 4, 3))).is_err());
        assert!(load_moving_masks(dir.path(), Some((2, 3, 4))).is_err());
        assert!(load_moving_masks(dir.path(), Some((2, 4, 3))).is_ok());

        let color = tempfile::tempdir().unwrap();
        io::write_png_rgb(&color.path().join("00000.png"), 2, 2, &[0; 12]).unwrap();
        let err = load_moving_masks(color.path(), None).unwrap_err();
        assert!(err.is_validation());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn masks_are_binary_closed_nonempty(seed in any::<u64>(), h in 16usize..80, w in 16usize..120) {
            let spec = MaskSpec::new(h, w, seed);
            let r = stationary_raster(&spec).unwrap();
            prop_assert!(!oracle::flood_leaks(w, h, &r.outline, &r.fill));
            let m = r.mask();
            prop_assert!(m.data.iter().all(|&v| v <= 1));
            prop_assert!(m.area() > 0);
            prop_assert!(m.fraction() <= 0.6);
        }
    }
}
