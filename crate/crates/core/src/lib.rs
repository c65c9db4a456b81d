//! Commonsense elicitation from language models as stories or rules:
//! perplexity-reduction confidence, four-condition QA, story scoring and an
//! iterative self-supervised fine-tuning loop.

pub mod analytics;
pub mod artifacts;
pub mod cli;
pub mod corpus;
pub mod digest;
pub mod elicit;
pub mod gateway;
pub mod perplexity;
pub mod pipeline;
pub mod prompting;
pub mod qa;
pub mod rng;
pub mod run;
pub mod scoring;
pub mod selfsft;
