//! Weakly-supervised neural-symbolic learning of arithmetic concepts.
//!
//! The library jointly acquires three levels of meaning for handwritten-style
//! arithmetic symbols, supervised only by the final result of each expression:
//!
//! - **perception** ([`perception`]): classifying raw glyph feature vectors
//!   into the symbol vocabulary,
//! - **syntax** ([`parser`]): a greedy transition-based dependency parser
//!   that turns a symbol sequence into a projective parse tree,
//! - **semantics** ([`semantics`]): per-concept functional programs over the
//!   primitives `{0, inc, dec, if, Y}`, induced from input-output examples.
//!
//! Training couples the three modules through a deduction-abduction loop
//! ([`learner`]): greedy deduction proposes a candidate solution tree, and a
//! priority-queue abduction searches its one-edit neighborhood for a revision
//! that explains the observed result. Accepted revisions provide pseudo
//! supervision for each module.
//!
//! [`expr`] holds the concept space and a ground-truth oracle used for data
//! generation; [`dataset`] generates the benchmark splits; [`eval`] runs the
//! five-subset evaluation, ablations, and few-shot concept learning.

pub mod dataset;
pub mod eval;
pub mod expr;
pub mod learner;
pub mod nn;
pub mod parser;
pub mod perception;
pub mod semantics;
