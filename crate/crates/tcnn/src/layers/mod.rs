//! The dense tensor engine: 3D convolution, 3D max pooling, fully-connected,
//! ReLU, L2 normalization and 1x1x1 channel mixing, each with an exact
//! backward pass. All forward/backward operations are pure functions of
//! their inputs; pooling argmax records are returned to the caller rather
//! than stored, so clips can run on different threads.

pub mod conv1x1;
pub mod conv3d;
pub mod dense;
pub mod pool3d;

pub use conv1x1::{Conv1x1Grads, Conv1x1Layer};
pub use conv3d::{Conv3DGrads, Conv3DLayer};
pub use dense::{
    l2norm_backward, l2norm_forward, relu_backward, relu_backward_from_output, relu_forward,
    relu_forward_inplace, FCGrads, FCLayer,
};
pub use pool3d::{MaxPool3DLayer, PoolRecord};
