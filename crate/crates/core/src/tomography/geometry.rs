use std::f64::consts::PI;

use super::TomoError;

/// 2D parallel-beam acquisition.
///
/// The image grid is centred at the origin with row 0 at the top. A ray with
/// angle `theta` and signed detector offset `s` is the line
/// `{ p : p . (cos theta, sin theta) = s }`; at angle 0 the rays are vertical
/// and `s` is the horizontal coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    angles: Vec<f64>,
    num_lines: usize,
    image_size: (usize, usize),
    pixel_spacing: f64,
    detector_spacing: f64,
}

impl Geometry {
    /// `num_angles` angles `k * pi / num_angles`, unit pixels, and a detector
    /// spanning the image diagonal.
    pub fn parallel(num_angles: usize, num_lines: usize, image_size: (usize, usize)) -> Result<Self, TomoError> {
        let (h, w) = image_size;
        let diag = ((h * h + w * w) as f64).sqrt();
        let spacing = if num_lines == 0 { 1.0 } else { diag / num_lines as f64 };
        Self::with_spacing(num_angles, num_lines, image_size, 1.0, spacing)
    }

    pub fn with_spacing(
        num_angles: usize,
        num_lines: usize,
        image_size: (usize, usize),
        pixel_spacing: f64,
        detector_spacing: f64,
    ) -> Result<Self, TomoError> {
        if num_angles == 0 || num_lines == 0 {
            return Err(TomoError::Geometry(format!(
                "need at least one angle and one line, got {num_angles} x {num_lines}"
            )));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(TomoError::Geometry(format!("empty image grid {image_size:?}")));
        }
        if !(pixel_spacing > 0.0 && detector_spacing > 0.0) {
            return Err(TomoError::Geometry("spacings must be positive".into()));
        }
        let angles = (0..num_angles).map(|k| k as f64 * PI / num_angles as f64).collect();
        Ok(Geometry { angles, num_lines, image_size, pixel_spacing, detector_spacing })
    }

    /// Classification setup: 5 angles, 25 lines, 28 x 28 images.
    pub fn mnist() -> Self {
        Self::parallel(5, 25, (28, 28)).expect("valid")
    }

    /// Segmentation setup: 30 angles, 183 lines, 128 x 128 images.
    pub fn segmentation() -> Self {
        Self::parallel(30, 183, (128, 128)).expect("valid")
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn num_lines(&self) -> usize {
        self.num_lines
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn sinogram_shape(&self) -> [usize; 2] {
        [self.num_angles(), self.num_lines]
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.image_size.0, self.image_size.1]
    }

    /// Signed offset of detector bin `k`.
    pub fn offset(&self, k: usize) -> f64 {
        (k as f64 - (self.num_lines as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// Physical centre `(x, y)` of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (h, w) = self.image_size;
        (
            (col as f64 - (w as f64 - 1.0) / 2.0) * self.pixel_spacing,
            ((h as f64 - 1.0) / 2.0 - row as f64) * self.pixel_spacing,
        )
    }
}
