//! Dense float64 building blocks: tensors, strided convolution and its adjoint,
//! small symmetric linear algebra, finite differences.

pub mod conv;
pub mod linalg;
pub mod numdiff;
pub mod tensor;

pub use conv::{conv2d, conv2d_adjoint, conv2d_adjoint_scatter, gap, project_zero_mean, relu, relu_backward, zero_insert, ConvLayer, ConvSpec};
pub use linalg::{cholesky, logdet_psd, orthonormal_complement, random_orthogonal, sym_eigen, Eigen, Matrix, SymMatrix};
pub use numdiff::{angle_collapse_bound, angle_collapse_sample, finite_diff_gradient, relative_error};
pub use tensor::{dot, mean, Mask, Tensor};
