//! Corpus generation, supervised pretraining, the dialog loop and the
//! reinforcement-learning run with its asynchronous update schedule.

pub mod corpus;
pub mod episode;
pub mod pipeline;
pub mod pretrain;
pub mod train;
