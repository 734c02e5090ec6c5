// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks_eval;
pub mod cli;
pub mod datasets;
pub mod diffcore;
pub mod mop_policy;
pub mod seeding;
pub mod sim;
pub mod teacher;
pub mod training;
