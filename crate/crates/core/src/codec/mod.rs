//! Analysis transform, quantization, entropy model, range coder and container format.

mod bitstream;
mod encoder;
mod entropy;
mod ladder;
mod quantize;
mod range_coder;

pub use bitstream::{
    action_table_bytes, container_bits, deserialize, fixed_overhead_bits, pack_actions, read_header, serialize,
    unpack_actions, Bitstream, Decoded, StreamHeader, MAGIC, PREFIX_BYTES, VERSION,
};
pub use encoder::{EncoderNet, DOWNSAMPLE, LATENT_CHANNELS};
pub use entropy::{
    discretized_gaussian_pmf, fit_entropy_model, gaussian_model, rate_estimate, symbol_bits, EntropyModel, ModelBank,
    RateEstimate, SymbolModel, ESCAPE_MASS, FREQ_BITS, FREQ_TOTAL, SIGMA_FLOOR,
};
pub use ladder::StepLadder;
pub use quantize::{quantize, round_half_away, QuantizedLatent, ALPHABET_LIMIT};
pub use range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder, CODER_OVERHEAD_BITS};
