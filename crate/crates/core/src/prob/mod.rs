//! Probability model and entropy coding.

pub mod density;
pub mod normal;
pub mod pmf;
pub mod quadrature;
pub mod range_coder;

pub use density::{
    prior_density, rate_nats, BoxedGaussian, UniformPosterior, SIGMA_MAX, SIGMA_MIN,
};
pub use normal::std_normal_cdf;
pub use pmf::{pmf_for_sigma, QuantizedPmf};
pub use range_coder::{rc_decode, rc_encode, RangeDecoder, RangeEncoder};
