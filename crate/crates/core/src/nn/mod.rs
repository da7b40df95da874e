//! Minimal CPU neural-network engine: NCHW tensors, convolution via im2col and
//! GEMM, hand-written backward passes and Adam. Single-threaded and
//! bit-reproducible for a fixed seed.

mod layers;
mod ops;
mod optim;
mod tensor;

pub use layers::{
    avg_pool2, max_pool2, max_pool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, Conv2d,
    ConvTranspose2d, Linear, Module, Param, WindowSpec,
};
pub use ops::{col2im, gemm, im2col, Window};
pub use optim::{Adam, StepDownSchedule};
pub use tensor::Tensor;
