//! Named-dimension shape contracts.
//!
//! Modules exchange tensors whose axes carry meaning (time, slots, height,
//! width, channels). A [`TensorSpec`] names each axis so boundary checks can
//! say *which* dimension disagreed instead of failing deep inside a matmul.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
    I64,
    U8,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
            Dtype::I64 => "i64",
            Dtype::U8 => "u8",
        }
    }
}

/// An ordered list of named, strictly positive dimensions plus a scalar kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    dims: Vec<(String, usize)>,
    dtype: Dtype,
}

impl TensorSpec {
    pub fn new(dims: &[(&str, usize)], dtype: Dtype) -> Result<Self> {
        for &(name, size) in dims {
            if size == 0 {
                return Err(Error::contract(format!(
                    "dimension '{name}' must be strictly positive"
                )));
            }
        }
        Ok(TensorSpec {
            dims: dims.iter().map(|&(n, s)| (n.to_string(), s)).collect(),
            dtype,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|(_, s)| *s).collect()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn dim(&self, name: &str) -> Option<usize> {
        self.dims.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    /// Two tensors interoperate only if every dimension name they share has
    /// exactly the same size.
    pub fn check_compatible(&self, other: &TensorSpec) -> Result<()> {
        for (name, size) in &self.dims {
            if let Some(other_size) = other.dim(name) {
                if other_size != *size {
                    return Err(Error::contract(format!(
                        "dimension '{name}' mismatch: {size} vs {other_size}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that a concrete runtime shape matches this spec.
    pub fn check_shape(&self, actual: &[usize], what: &str) -> Result<()> {
        let expected = self.shape();
        if actual != expected.as_slice() {
            let named: Vec<String> = self
                .dims
                .iter()
                .map(|(n, s)| format!("{n}={s}"))
                .collect();
            return Err(Error::contract(format!(
                "{what}: shape {actual:?} does not match [{}]",
                named.join(", ")
            )));
        }
        Ok(())
    }
}
