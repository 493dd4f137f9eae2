//! Encoder, planner with value heads, codebook, P-Former and generator.

mod bundle;
pub mod checkpoint;
pub mod policy;
pub mod tokenizer;

pub use bundle::{
    softmax_dist, DecodeParams, DecodeStrategy, GeneratorExample, Generation, ModelBundle, ModelConfig,
    PlannerOutput, PolicyTokens, Trainable, CODEBOOK, COMPONENTS, ENCODER, GENERATOR, PFORMER, PLANNER,
    Q_HEAD, V_HEAD,
};
pub use checkpoint::{checkpoint_hash, codebook_csv, read_stage_manifest, load_checkpoint, save_checkpoint, Stage, StageManifest};
pub use policy::{argmax, expected_q, mix_latent, Codebook, LatentPolicy, PolicyDistribution};
pub use tokenizer::Tokenizer;
