//! Element types for tensors: f32 for training runs, f64 for oracles and
//! gradient checks.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Storage dtype tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element of a tensor.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_v(self) -> bool;
    fn exp_v(self) -> Self;
    fn ln_v(self) -> Self;
    fn sqrt_v(self) -> Self;
    fn tanh_v(self) -> Self;
    fn abs_v(self) -> Self;
    fn powf_v(self, p: Self) -> Self;
    fn max_v(self, o: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
    fn exp_v(self) -> Self {
        self.exp()
    }
    fn ln_v(self) -> Self {
        self.ln()
    }
    fn sqrt_v(self) -> Self {
        self.sqrt()
    }
    fn tanh_v(self) -> Self {
        self.tanh()
    }
    fn abs_v(self) -> Self {
        self.abs()
    }
    fn powf_v(self, p: Self) -> Self {
        self.powf(p)
    }
    fn max_v(self, o: Self) -> Self {
        self.max(o)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
    fn exp_v(self) -> Self {
        self.exp()
    }
    fn ln_v(self) -> Self {
        self.ln()
    }
    fn sqrt_v(self) -> Self {
        self.sqrt()
    }
    fn tanh_v(self) -> Self {
        self.tanh()
    }
    fn abs_v(self) -> Self {
        self.abs()
    }
    fn powf_v(self, p: Self) -> Self {
        self.powf(p)
    }
    fn max_v(self, o: Self) -> Self {
        self.max(o)
    }
}
