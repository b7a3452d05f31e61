use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{MocError, Result};

/// Scalar element type for all tensor math.
///
/// The model and CLI instantiate `f32`; finite-difference oracles in the test
/// suite instantiate `f64` to stay above the single-precision noise floor.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lift an `f64` literal into the active scalar type.
pub fn sc<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("literal not representable")
}

/// Highest tensor rank the engine supports (image batches never need more).
pub const MAX_RANK: usize = 4;

/// Dense row-major tensor. A scalar is represented by an empty shape.
///
/// The buffer is shared copy-on-write, so clones and reshapes are cheap;
/// mutation clones the buffer only while other handles still point at it.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    /// Build a tensor from a shape and matching flat row-major data.
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(MocError::Shape(format!(
                "rank {} exceeds the supported maximum {MAX_RANK}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MocError::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Self { shape: shape.to_vec(), data: Arc::new(vec![F::zero(); numel]) }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Self { shape: shape.to_vec(), data: Arc::new(vec![v; numel]) }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: F) -> Self {
        Self { shape: vec![], data: Arc::new(vec![v]) }
    }

    /// Fill from a generator over the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Self { shape: shape.to_vec(), data: Arc::new((0..numel).map(&mut f).collect()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the tensor holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Reinterpret the flat data under a new shape with the same element
    /// count. The buffer is shared, not copied.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(MocError::Shape(format!(
                "rank {} exceeds the supported maximum {MAX_RANK}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(MocError::Shape(format!(
                "shape {shape:?} implies {numel} elements, tensor has {}",
                self.data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    /// Error out if any element is NaN or infinite. `ctx` names the producer.
    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MocError::Numeric(format!("non-finite value produced by {ctx}")))
        }
    }

    /// Convert elementwise into another scalar type (used by checkpoints).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect()),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, MocError::Shape(_)), "got {err:?}");
    }

    #[test]
    fn rank_is_capped() {
        let err = Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).unwrap_err();
        assert!(matches!(err, MocError::Shape(_)), "got {err:?}");
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::scalar(3.5f32);
        assert!(t.shape().is_empty());
        assert_eq!(t.len(), 1);
        assert!(t.is_scalar());
    }

    #[test]
    fn finiteness_check_flags_nan_and_inf() {
        let ok = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        assert!(ok.check_finite("test").is_ok());
        let nan = Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(nan.check_finite("test").unwrap_err(), MocError::Numeric(_)));
        let inf = Tensor::<f32>::new(&[1], vec![f32::INFINITY]).unwrap();
        assert!(matches!(inf.check_finite("test").unwrap_err(), MocError::Numeric(_)));
    }

    #[test]
    fn reshape_preserves_data_layout() {
        let t = Tensor::<f32>::new(&[2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
