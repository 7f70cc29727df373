// Validators use negated float comparisons on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod engine;
pub mod harness;
pub mod hpa;
pub mod model;
pub mod par;
pub mod rpca;
pub mod tensor;
