//! Token encoder, classification head, spectral normalization, masked-token
//! pretraining and the checkpoint container.

pub mod checkpoint;
pub mod encoder;
pub mod head;
pub mod pretrain;
pub mod spectral;

pub use checkpoint::{file_hash, model_checkpoint, model_from_checkpoint, Checkpoint};
pub use encoder::{
    embed, embed_then_encode, encode, encode_batch, encode_many, pool, run_blocks, EncoderConfig,
    EncoderParams, EncoderVars, Pooling,
};
pub use head::{
    head_forward, head_logits, head_scores, HeadConfig, HeadParams, HeadVars, LinearLayer,
    EVAL_SPECTRAL_ITERS, TRAIN_SPECTRAL_ITERS,
};
pub use pretrain::{masked_accuracy, pretrain, PretrainConfig, PretrainOutcome};
pub use spectral::{power_iterate, spectral_normalize, SpectralState};
