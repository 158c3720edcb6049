//! Encoder, concept model and decoder.

mod checkpoint;
mod codec;
mod concept;
mod config;
mod layers;
mod pipeline;

pub use checkpoint::{
    check_config, checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, pipeline_from_bytes,
    save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use codec::{DecoderBlock, EncoderBlock, LanguageDecoder, LanguageEncoder};
pub use concept::{ConceptBlock, ConceptModel, ConceptOutput, FeedForward};
pub use config::{count_params, ModelConfig, ParamReport};
pub use layers::{Attention, Norm, Packed};
pub use pipeline::{argmax, LmOutput, Modules, SutraPipeline};
