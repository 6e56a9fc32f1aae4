//! Layer vocabulary: convolutions, normalization, correlation and label
//! rescaling. The differentiable entry points are methods on
//! [`Graph`](crate::autodiff::Graph); this module holds their geometry and
//! raw kernels.

pub mod conv;
pub mod correlation;
pub mod labels;
pub mod norm;

pub use conv::ConvSpec;
pub use correlation::CorrSpec;
pub use labels::Labels;
pub use norm::BnStats;
