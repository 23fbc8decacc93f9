//! Dense tensors, the reverse-mode tape, and the FFT pair.

pub mod fft;
mod kernels;
pub mod real;
pub mod tape;
pub mod tensor;

pub use fft::{irfft, num_bins, rfft, ComplexSpectrum};
pub use real::{DType, Real, Strided, StridedMut};
pub use tape::{Fault, Tape, Var};
pub use tensor::Tensor;
