//! Layer-wise symmetric quantization.
//!
//! One scale per tensor: `q = clip(round(x / scale), -2^(b-1), 2^(b-1) - 1)` and
//! `x_hat = q * scale`. Rounding is half away from zero. [`fake_quant`] records
//! the quantize-dequantize pair on a tape with a straight-through gradient that
//! is zero wherever the pre-clip integer falls outside the representable range.

use serde::{Deserialize, Serialize};

use crate::gradtape::{Tape, TapeError, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QuantError {
    #[error("unsupported bit width {0}; expected 4 or 8")]
    Bits(u32),
    #[error("scale must be positive and finite, got {0}")]
    Scale(f64),
    #[error("EMA momentum must lie in (0, 1), got {0}")]
    Momentum(f64),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Supported integer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    Four,
    Eight,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Four => 4,
            BitWidth::Eight => 8,
        }
    }

    pub fn qmin(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub fn qmax(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = QuantError;

    fn try_from(bits: u32) -> Result<Self, Self::Error> {
        match bits {
            4 => Ok(BitWidth::Four),
            8 => Ok(BitWidth::Eight),
            other => Err(QuantError::Bits(other)),
        }
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantTarget {
    Weight,
    Activation,
}

/// Bit width plus the single per-tensor scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    bits: BitWidth,
    scale: f64,
    target: QuantTarget,
}

impl QuantSpec {
    pub fn new(bits: BitWidth, scale: f64, target: QuantTarget) -> Result<Self, QuantError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::Scale(scale));
        }
        Ok(Self {
            bits,
            scale,
            target,
        })
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn target(&self) -> QuantTarget {
        self.target
    }
}

/// Integers in 8-bit containers (4-bit values sign-extended) with their scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    ints: Vec<i8>,
    scale: f64,
    bits: BitWidth,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, ints: Vec<i8>, scale: f64, bits: BitWidth) -> Result<Self, QuantError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::Scale(scale));
        }
        assert_eq!(shape.iter().product::<usize>(), ints.len(), "shape/data mismatch");
        debug_assert!(ints
            .iter()
            .all(|&q| (bits.qmin()..=bits.qmax()).contains(&(q as i32))));
        Ok(Self {
            shape,
            ints,
            scale,
            bits,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ints(&self) -> &[i8] {
        &self.ints
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }
}

/// Exponential moving average of an activation's max-abs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub running_max: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl EmaState {
    pub fn new(momentum: f64) -> Result<Self, QuantError> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(QuantError::Momentum(momentum));
        }
        Ok(Self {
            running_max: 0.0,
            momentum,
            initialized: false,
        })
    }

    /// Folds in a new observation; the first one initializes the average.
    pub fn update(&mut self, observed_max: f64) -> f64 {
        if self.initialized {
            self.running_max = self.momentum * self.running_max + (1.0 - self.momentum) * observed_max;
        } else {
            self.running_max = observed_max;
            self.initialized = true;
        }
        self.running_max
    }
}

/// `max_abs / (2^(b-1) - 1)`, or 1 when the range is degenerate.
pub fn scale_for_max(max_abs: f64, bits: BitWidth) -> f64 {
    if max_abs > 0.0 && max_abs.is_finite() {
        max_abs / bits.qmax() as f64
    } else {
        1.0
    }
}

/// Max-abs calibration; with `ema`, the running average is updated and used.
pub fn calibrate_scale(x: &Tensor, bits: BitWidth, ema: Option<&mut EmaState>) -> f64 {
    let m = x.max_abs();
    let m = match ema {
        Some(state) => state.update(m),
        None => m,
    };
    scale_for_max(m, bits)
}

/// Quantizes one value; the flag reports whether the rounded integer was
/// inside the range before clipping.
#[inline]
pub fn quantize_value(x: f64, scale: f64, bits: BitWidth) -> (i8, bool) {
    let r = (x / scale).round();
    let (lo, hi) = (bits.qmin() as f64, bits.qmax() as f64);
    let in_range = r >= lo && r <= hi;
    (r.clamp(lo, hi) as i8, in_range)
}

pub fn quantize(x: &Tensor, spec: &QuantSpec) -> QuantizedTensor {
    let ints = x
        .data()
        .iter()
        .map(|&v| quantize_value(v, spec.scale, spec.bits).0)
        .collect();
    QuantizedTensor {
        shape: x.shape().to_vec(),
        ints,
        scale: spec.scale,
        bits: spec.bits,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor::from_raw(
        q.shape.clone(),
        q.ints.iter().map(|&i| i as f64 * q.scale).collect(),
    )
}

/// Forward rule of a fake-quant node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FakeQuantMode {
    /// Quantize then dequantize.
    #[default]
    Round,
    /// Clip to the representable range without rounding. Same mask rule as
    /// `Round`, so its tape gradient is the exact derivative of its forward;
    /// used as the differentiable surrogate in gradient checks.
    ClipOnly,
}

#[inline]
fn fake_value(x: f64, spec: &QuantSpec, mode: FakeQuantMode) -> (f64, bool) {
    match mode {
        FakeQuantMode::Round => {
            let (q, in_range) = quantize_value(x, spec.scale, spec.bits);
            (q as f64 * spec.scale, in_range)
        }
        FakeQuantMode::ClipOnly => {
            let u = x / spec.scale;
            let (lo, hi) = (spec.bits.qmin() as f64, spec.bits.qmax() as f64);
            (u.clamp(lo, hi) * spec.scale, u >= lo && u <= hi)
        }
    }
}

/// Records `dequantize(quantize(x))` with a straight-through gradient.
pub fn fake_quant(tape: &mut Tape, x: Var, spec: &QuantSpec) -> Result<Var, QuantError> {
    fake_quant_mode(tape, x, spec, FakeQuantMode::Round)
}

pub fn fake_quant_mode(
    tape: &mut Tape,
    x: Var,
    spec: &QuantSpec,
    mode: FakeQuantMode,
) -> Result<Var, QuantError> {
    let t = tape.value(x);
    let (vals, mask): (Vec<f64>, Vec<bool>) =
        t.data().iter().map(|&v| fake_value(v, spec, mode)).unzip();
    let value = Tensor::new(t.shape().to_vec(), vals)?;
    Ok(tape.straight_through(x, value, mask)?)
}

/// Token-adaptive fake quantization of a `[rows, D]` activation: rows flagged
/// in `hi_rows` use `hi`, the rest use `lo`. Two scales per matrix, never more.
pub fn fake_quant_grouped(
    tape: &mut Tape,
    x: Var,
    hi_rows: &[bool],
    hi: &QuantSpec,
    lo: &QuantSpec,
    mode: FakeQuantMode,
) -> Result<Var, QuantError> {
    let t = tape.value(x);
    let cols = t.cols();
    if hi_rows.len() != t.rows() {
        return Err(TapeError::Shape {
            op: "fake_quant_grouped",
            lhs: t.shape().to_vec(),
            rhs: vec![hi_rows.len()],
        }
        .into());
    }
    let mut vals = Vec::with_capacity(t.len());
    let mut mask = Vec::with_capacity(t.len());
    for (r, &is_hi) in hi_rows.iter().enumerate() {
        let spec = if is_hi { hi } else { lo };
        for &v in &t.data()[r * cols..(r + 1) * cols] {
            let (fv, m) = fake_value(v, spec, mode);
            vals.push(fv);
            mask.push(m);
        }
    }
    let value = Tensor::new(t.shape().to_vec(), vals)?;
    Ok(tape.straight_through(x, value, mask)?)
}
