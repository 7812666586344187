//! Latent-space data model shared by the encoder, the manipulators and the
//! generator.
//!
//! A style-based generator at resolution `R` consumes `2·log2(R) − 2` style
//! codes. The hierarchical representation splits them into four *low* codes
//! (coarse topology) and the remaining *high* codes (semantics), and adds the
//! generator's 4×4 constant input tensor as a predicted quantity.

use std::io::{Read, Write};
use std::path::Path;

use latentswap_autograd::Tensor;

use crate::codec;
use crate::{Error, Result};

/// Width of one style code unless configured otherwise.
pub const DEFAULT_CODE_DIM: usize = 512;

/// Number of coarse codes predicted from the smallest feature map.
pub const LOW_CODE_COUNT: usize = 4;

/// Side of the generator's constant input.
pub const CONSTANT_SIDE: usize = 4;

/// Style-code count of a generator at `resolution`: `2·log2(R) − 2`.
pub fn code_count(resolution: usize) -> Result<usize> {
    if !resolution.is_power_of_two() || resolution < 16 {
        return Err(Error::dim(format!(
            "resolution {resolution} is not a power of two >= 16"
        )));
    }
    Ok(2 * resolution.trailing_zeros() as usize - 2)
}

/// High-code count at `resolution`.
pub fn high_code_count(resolution: usize) -> Result<usize> {
    Ok(code_count(resolution)? - LOW_CODE_COUNT)
}

/// Inverse of [`code_count`].
pub fn resolution_for_code_count(n_total: usize) -> Result<usize> {
    if n_total < 6 || !n_total.is_multiple_of(2) || n_total > 62 {
        return Err(Error::dim(format!(
            "{n_total} codes do not correspond to any supported resolution"
        )));
    }
    Ok(1usize << ((n_total + 2) / 2))
}

/// One style code `l ∈ R^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                field: "latent code".into(),
                reason: format!("entry {i} is not finite"),
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice([self.0.len()], &self.0)
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::dim(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// Splits an `(N_total, D)` stack into the four low codes and the rest.
pub fn split_codes(codes: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, _) = matrix_dims(codes, "code stack")?;
    if n <= LOW_CODE_COUNT {
        return Err(Error::dim(format!(
            "code stack needs at least {} rows, got {n}",
            LOW_CODE_COUNT + 1
        )));
    }
    Ok((
        codes.narrow(0, LOW_CODE_COUNT),
        codes.narrow(LOW_CODE_COUNT, n - LOW_CODE_COUNT),
    ))
}

/// Inverse of [`split_codes`].
pub fn merge_codes(low: &Tensor, high: &Tensor) -> Result<Tensor> {
    let (nl, dl) = matrix_dims(low, "low codes")?;
    let (_, dh) = matrix_dims(high, "high codes")?;
    if nl != LOW_CODE_COUNT {
        return Err(Error::dim(format!(
            "expected {LOW_CODE_COUNT} low codes, got {nl}"
        )));
    }
    if dl != dh {
        return Err(Error::dim(format!(
            "low codes have width {dl}, high codes {dh}"
        )));
    }
    Ok(Tensor::concat(&[low, high]))
}

fn check_finite(t: &Tensor, field: &str) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Validation {
            field: field.into(),
            reason: format!("entry {i} is {}", t.data()[i]),
        }),
    }
}

/// The extended (W++) representation of one face: the generator's constant
/// input `C` (4, 4, D), four low codes and `N_high` high codes.
#[derive(Clone, Debug, PartialEq)]
pub struct HierLatent {
    constant_input: Tensor,
    low_codes: Tensor,
    high_codes: Tensor,
    resolution: usize,
}

impl HierLatent {
    /// Builds and validates.
    pub fn new(
        constant_input: Tensor,
        low_codes: Tensor,
        high_codes: Tensor,
        resolution: usize,
    ) -> Result<Self> {
        let latent = Self::new_unchecked(constant_input, low_codes, high_codes, resolution);
        latent.validate()?;
        Ok(latent)
    }

    /// Builds without checking invariants; call [`validate`](Self::validate)
    /// before handing the value to anything else.
    pub fn new_unchecked(
        constant_input: Tensor,
        low_codes: Tensor,
        high_codes: Tensor,
        resolution: usize,
    ) -> Self {
        Self {
            constant_input,
            low_codes,
            high_codes,
            resolution,
        }
    }

    pub fn zeros(resolution: usize, code_dim: usize) -> Result<Self> {
        let n_high = high_code_count(resolution)?;
        Self::new(
            Tensor::zeros([CONSTANT_SIDE, CONSTANT_SIDE, code_dim]),
            Tensor::zeros([LOW_CODE_COUNT, code_dim]),
            Tensor::zeros([n_high, code_dim]),
            resolution,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n_total = code_count(self.resolution)?;
        let d = self.code_dim();
        if self.constant_input.shape() != [CONSTANT_SIDE, CONSTANT_SIDE, d] {
            return Err(Error::dim(format!(
                "constant_input has shape {:?}, expected [4, 4, {d}]",
                self.constant_input.shape()
            )));
        }
        let (nl, dl) = matrix_dims(&self.low_codes, "low_codes")?;
        let (nh, dh) = matrix_dims(&self.high_codes, "high_codes")?;
        if nl != LOW_CODE_COUNT || dl != d {
            return Err(Error::dim(format!(
                "low_codes has shape [{nl}, {dl}], expected [{LOW_CODE_COUNT}, {d}]"
            )));
        }
        if nh != n_total - LOW_CODE_COUNT || dh != d {
            return Err(Error::dim(format!(
                "high_codes has shape [{nh}, {dh}], expected [{}, {d}] at resolution {}",
                n_total - LOW_CODE_COUNT,
                self.resolution
            )));
        }
        check_finite(&self.constant_input, "constant_input")?;
        check_finite(&self.low_codes, "low_codes")?;
        check_finite(&self.high_codes, "high_codes")
    }

    pub fn constant_input(&self) -> &Tensor {
        &self.constant_input
    }

    pub fn low_codes(&self) -> &Tensor {
        &self.low_codes
    }

    pub fn high_codes(&self) -> &Tensor {
        &self.high_codes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn code_dim(&self) -> usize {
        self.constant_input.shape().last().copied().unwrap_or(0)
    }

    /// All codes stacked `(N_total, D)`.
    pub fn codes(&self) -> Result<Tensor> {
        merge_codes(&self.low_codes, &self.high_codes)
    }

    /// Same constant and low codes, different high codes.
    pub fn with_high_codes(&self, high_codes: Tensor) -> Result<Self> {
        Self::new(
            self.constant_input.clone(),
            self.low_codes.clone(),
            high_codes,
            self.resolution,
        )
    }

    /// Writes the three fields as consecutive binary blocks.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        codec::write_block(w, &self.constant_input)?;
        codec::write_block(w, &self.low_codes)?;
        codec::write_block(w, &self.high_codes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let c = codec::read_block(r).map_err(|e| Error::Argument(format!("constant block: {e}")))?;
        let low = codec::read_block(r).map_err(|e| Error::Argument(format!("low block: {e}")))?;
        let high = codec::read_block(r).map_err(|e| Error::Argument(format!("high block: {e}")))?;
        let n_total = LOW_CODE_COUNT + high.shape().first().copied().unwrap_or(0);
        let resolution = resolution_for_code_count(n_total)?;
        Self::new(c, low, high, resolution)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut f)
    }
}

/// The W+ representation: `N_total` codes, no constant input (the
/// generator's learned constant is used).
#[derive(Clone, Debug, PartialEq)]
pub struct WPlusLatent {
    codes: Tensor,
    resolution: usize,
}

impl WPlusLatent {
    pub fn new(codes: Tensor, resolution: usize) -> Result<Self> {
        let n_total = code_count(resolution)?;
        let (n, _) = matrix_dims(&codes, "codes")?;
        if n != n_total {
            return Err(Error::dim(format!(
                "W+ latent at resolution {resolution} needs {n_total} codes, got {n}"
            )));
        }
        check_finite(&codes, "codes")?;
        Ok(Self { codes, resolution })
    }

    /// Builds without checking the code count or finiteness.
    pub fn new_unchecked(codes: Tensor, resolution: usize) -> Self {
        Self { codes, resolution }
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn code_dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn low_codes(&self) -> Tensor {
        self.codes.narrow(0, LOW_CODE_COUNT)
    }

    pub fn high_codes(&self) -> Tensor {
        self.codes.narrow(LOW_CODE_COUNT, self.codes.shape()[0] - LOW_CODE_COUNT)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        codec::write_block(w, &self.codes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let codes = codec::read_block(r).map_err(|e| Error::Argument(format!("codes block: {e}")))?;
        let resolution = resolution_for_code_count(codes.shape().first().copied().unwrap_or(0))?;
        Self::new(codes, resolution)
    }
}

/// Which latent space an encoder targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LatentSpace {
    /// Codes plus a predicted constant input.
    #[serde(rename = "w++")]
    WPlusPlus,
    /// Codes only.
    #[serde(rename = "w+")]
    WPlus,
}

impl LatentSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            LatentSpace::WPlusPlus => "w++",
            LatentSpace::WPlus => "w+",
        }
    }
}

impl std::str::FromStr for LatentSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w++" | "wplusplus" | "w_plus_plus" => Ok(LatentSpace::WPlusPlus),
            "w+" | "wplus" | "w_plus" => Ok(LatentSpace::WPlus),
            other => Err(Error::Config(format!("unknown latent space '{other}'"))),
        }
    }
}

/// Output of an encoder in either space.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoded {
    WPlusPlus(HierLatent),
    WPlus(WPlusLatent),
}

impl Encoded {
    pub fn space(&self) -> LatentSpace {
        match self {
            Encoded::WPlusPlus(_) => LatentSpace::WPlusPlus,
            Encoded::WPlus(_) => LatentSpace::WPlus,
        }
    }

    pub fn constant_input(&self) -> Option<&Tensor> {
        match self {
            Encoded::WPlusPlus(h) => Some(h.constant_input()),
            Encoded::WPlus(_) => None,
        }
    }

    pub fn low_codes(&self) -> Tensor {
        match self {
            Encoded::WPlusPlus(h) => h.low_codes().clone(),
            Encoded::WPlus(w) => w.low_codes(),
        }
    }

    pub fn high_codes(&self) -> Tensor {
        match self {
            Encoded::WPlusPlus(h) => h.high_codes().clone(),
            Encoded::WPlus(w) => w.high_codes(),
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            Encoded::WPlusPlus(h) => h.resolution(),
            Encoded::WPlus(w) => w.resolution(),
        }
    }

    pub fn code_dim(&self) -> usize {
        match self {
            Encoded::WPlusPlus(h) => h.code_dim(),
            Encoded::WPlus(w) => w.code_dim(),
        }
    }

    /// Keeps this latent's constant input and low codes, replacing the high
    /// codes.
    pub fn with_high_codes(&self, high: Tensor) -> Result<Encoded> {
        match self {
            Encoded::WPlusPlus(h) => Ok(Encoded::WPlusPlus(h.with_high_codes(high)?)),
            Encoded::WPlus(w) => Ok(Encoded::WPlus(WPlusLatent::new(
                merge_codes(&w.low_codes(), &high)?,
                w.resolution(),
            )?)),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        match self {
            Encoded::WPlusPlus(h) => h.write_to(w),
            Encoded::WPlus(p) => p.write_to(w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 2]) -> Tensor {
        let n = shape[0] * shape[1];
        Tensor::new(shape, (0..n).map(|i| i as f64 * 0.5 - 3.0).collect())
    }

    #[test]
    fn code_count_rule() {
        let expected = [(32, 8), (64, 10), (128, 12), (256, 14), (512, 16), (1024, 18)];
        for (r, n) in expected {
            assert_eq!(code_count(r).unwrap(), n);
            assert_eq!(resolution_for_code_count(n).unwrap(), r);
        }
        assert_eq!(high_code_count(1024).unwrap(), 14);
        assert!(code_count(100).is_err());
        assert!(code_count(8).is_err());
    }

    #[test]
    fn split_full_scale_stack() {
        let (low, high) = split_codes(&Tensor::zeros([18, 512])).unwrap();
        assert_eq!(low.shape(), &[4, 512]);
        assert_eq!(high.shape(), &[14, 512]);
    }

    #[test]
    fn split_resolution_64_stack() {
        let (low, high) = split_codes(&Tensor::zeros([10, 512])).unwrap();
        assert_eq!(low.shape(), &[4, 512]);
        assert_eq!(high.shape(), &[6, 512]);
    }

    #[test]
    fn split_merge_round_trip_is_exact() {
        let m = ramp([10, 7]);
        let (low, high) = split_codes(&m).unwrap();
        assert_eq!(merge_codes(&low, &high).unwrap(), m);
        assert_eq!(low.data(), &m.data()[..28]);
    }

    #[test]
    fn split_rejects_short_stacks() {
        assert!(matches!(
            split_codes(&Tensor::zeros([4, 8])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_latent_validates() {
        HierLatent::zeros(1024, 512).unwrap().validate().unwrap();
    }

    #[test]
    fn nan_is_reported_with_field_name() {
        let mut high = Tensor::zeros([14, 512]);
        high.data_mut()[77] = f64::NAN;
        let h = HierLatent::new_unchecked(
            Tensor::zeros([4, 4, 512]),
            Tensor::zeros([4, 512]),
            high,
            1024,
        );
        match h.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "high_codes"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn infinity_in_constant_is_rejected() {
        let mut c = Tensor::zeros([4, 4, 8]);
        c.data_mut()[3] = f64::INFINITY;
        let h = HierLatent::new_unchecked(c, Tensor::zeros([4, 8]), Tensor::zeros([4, 8]), 32);
        assert!(matches!(h.validate(), Err(Error::Validation { field, .. }) if field == "constant_input"));
    }

    #[test]
    fn thirteen_high_codes_at_1024_is_a_dimension_error() {
        let h = HierLatent::new_unchecked(
            Tensor::zeros([4, 4, 512]),
            Tensor::zeros([4, 512]),
            Tensor::zeros([13, 512]),
            1024,
        );
        assert!(matches!(h.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn latent_file_round_trip() {
        let h = HierLatent::new(
            Tensor::full([4, 4, 3], 0.25),
            ramp([4, 3]),
            ramp([4, 3]),
            32,
        )
        .unwrap();
        let mut buf = Vec::new();
        h.write_to(&mut buf).unwrap();
        let back = HierLatent::read_from(&mut buf.as_slice()).unwrap();
        // values are exactly representable in f32
        assert_eq!(back, h);
    }

    #[test]
    fn wplus_requires_full_stack() {
        assert!(WPlusLatent::new(Tensor::zeros([8, 4]), 32).is_ok());
        assert!(WPlusLatent::new(Tensor::zeros([7, 4]), 32).is_err());
    }

    #[test]
    fn latent_space_parses() {
        assert_eq!("W++".parse::<LatentSpace>().unwrap(), LatentSpace::WPlusPlus);
        assert_eq!("w+".parse::<LatentSpace>().unwrap(), LatentSpace::WPlus);
        assert!("w".parse::<LatentSpace>().is_err());
    }
}
