use latentswap_autograd::Tensor;

use crate::{Error, Result};

/// An RGB face crop with values in `[-1, 1]`.
///
/// Pixels are stored planar, `[3, height, width]`; [`get`](Self::get) and
/// [`to_hwc`](Self::to_hwc) give the interleaved view.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pixels: Tensor,
}

impl FaceImage {
    /// Wraps a planar `[3, R, R]` tensor, checking shape, finiteness and range.
    pub fn new(pixels: Tensor) -> Result<Self> {
        match pixels.shape() {
            [3, h, w] if h == w && *h > 0 => {}
            s => {
                return Err(Error::dim(format!(
                    "face image must be [3, R, R], got {s:?}"
                )))
            }
        }
        if let Some(i) = pixels.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("pixel {i} is {}", pixels.data()[i])));
        }
        if let Some(i) = pixels.data().iter().position(|v| v.abs() > 1.0) {
            return Err(Error::Validation {
                field: "pixels".into(),
                reason: format!("pixel {i} = {} outside [-1, 1]", pixels.data()[i]),
            });
        }
        Ok(Self { pixels })
    }

    /// Builds from an interleaved `(H, W, 3)` buffer.
    pub fn from_hwc(side: usize, data: &[f64]) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(Error::dim(format!(
                "{} values do not form a {side}x{side} RGB image",
                data.len()
            )));
        }
        let mut planar = vec![0.0; data.len()];
        for (i, px) in data.chunks(3).enumerate() {
            for c in 0..3 {
                planar[c * side * side + i] = px[c];
            }
        }
        Self::new(Tensor::new([3, side, side], planar))
    }

    pub fn filled(side: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * side * side);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, side * side));
        }
        Self::new(Tensor::new([3, side, side], data))
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    /// Value at row `y`, column `x`, channel `c`.
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        let r = self.resolution();
        self.pixels.data()[(c * r + y) * r + x]
    }

    /// Interleaved `(H, W, 3)` copy.
    pub fn to_hwc(&self) -> Vec<f64> {
        let r = self.resolution();
        let mut out = Vec::with_capacity(3 * r * r);
        for i in 0..r * r {
            for c in 0..3 {
                out.push(self.pixels.data()[c * r * r + i]);
            }
        }
        out
    }

    pub fn mean_squared_error(&self, other: &FaceImage) -> Result<f64> {
        if self.resolution() != other.resolution() {
            return Err(Error::dim(format!(
                "comparing {}px with {}px images",
                self.resolution(),
                other.resolution()
            )));
        }
        let n = self.pixels.len() as f64;
        Ok(self
            .pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hwc_round_trip() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let img = FaceImage::from_hwc(2, &data).unwrap();
        assert_eq!(img.to_hwc(), data);
        assert_eq!(img.get(0, 1, 2), data[5]);
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let t = Tensor::full([3, 2, 2], 1.5);
        assert!(matches!(FaceImage::new(t), Err(Error::Validation { .. })));
    }

    #[test]
    fn non_square_is_a_dimension_error() {
        let t = Tensor::zeros([3, 2, 4]);
        assert!(matches!(FaceImage::new(t), Err(Error::Dimension(_))));
    }

    #[test]
    fn nan_is_numeric() {
        let mut t = Tensor::zeros([3, 2, 2]);
        t.data_mut()[0] = f64::NAN;
        assert!(matches!(FaceImage::new(t), Err(Error::Numeric(_))));
    }
}
