//! Conditional multi-scale generator with matching-aware discriminators and
//! an optional FoodSpace cycle term.

mod losses;
mod model;
mod train;

pub use losses::{
    conditional_term_from_probs, cycle_similarity, discriminator_loss, fake_term, generator_loss,
    kl_standard_normal, real_term, unconditional_term_from_probs, DiscriminatorLogits, GeneratorLossParts,
    GeneratorScale, LossWeights,
};
pub use model::{gaussian, AppearanceFactor, CondAugment, Discriminator, GanConfig, Generator, MealGan};
pub use train::{rows_to_tensor, train_gan, GanData, GanStepLog, GanTrainConfig, GanTrainLog};
