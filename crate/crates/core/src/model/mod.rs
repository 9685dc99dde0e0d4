//! The inverse model: LSTM cells, the variational layer, and the
//! encoder/decoder/regressor assembly.

mod bim;
mod linear;
mod lstm;
mod posterior;
mod variational;

pub use bim::{batch_steps, BimConfig, BimModel, EncoderOutput, ForwardVars, Layer, Mode, ModelNoise};
pub use linear::Linear;
pub use lstm::{BoundLstm, CandidateActivation, LstmParams};
pub use posterior::PosteriorSampleSet;
pub use variational::{
    gaussian_kl, kl_variational_prior, sample_variational_weights, LayerNoise, VariationalLayerParams,
};
