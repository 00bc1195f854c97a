pub mod adc;
pub mod autodiff;
pub mod crossformer;
pub mod dataset;
pub mod kan;
pub mod nn;
pub mod signal;
pub mod train;
