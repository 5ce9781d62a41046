//! Surrogate-assisted neuroevolution of convolutional network architectures.
//!
//! Architectures are encoded as linear genetic programs ([`genome`]) and
//! mapped to layer stacks ([`phenotype`]) that a small built-in trainer
//! ([`smallnet`]) can fit. Partially trained networks are summarised by
//! their output probabilities on the validation split; a Kriging model on
//! partial-least-squares directions ([`surrogate`]) predicts full-training
//! fitness from those vectors, and the evolutionary loop ([`engine`]) uses
//! expected improvement to decide which offspring are worth training in
//! full. [`analytics`] scores the surrogate and estimates energy use.

pub mod analytics;
pub mod engine;
pub mod genome;
pub mod phenotype;
pub mod smallnet;
pub mod surrogate;
