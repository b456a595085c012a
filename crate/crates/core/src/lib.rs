pub mod bounds;
pub mod correction;
pub mod derivatives;
pub mod error;
pub mod gp;
pub mod harness;
pub mod instrument;
pub mod kernel;
pub mod oracle;
pub mod tensor;
