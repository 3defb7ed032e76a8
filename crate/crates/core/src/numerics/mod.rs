//! Numerical building blocks shared by the model modules.

pub mod fit;
pub mod jet;
pub mod linalg;
pub mod quad;
pub mod roots;

pub use fit::{fit_line, log_log_slope, CompensatedSum, LineFit};
pub use jet::Jet;
pub use linalg::{cholesky_psd, pinv_full_column_rank};
pub use quad::{integrate, integrate_vec, GaussLegendre, QuadResult};
pub use roots::{bracket_increasing, brent};
