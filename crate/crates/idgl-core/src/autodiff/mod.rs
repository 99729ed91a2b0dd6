//! Reverse-mode automatic differentiation over matrix-valued operations.

pub mod tape;

pub use tape::{BitMask, ConstId, CsrId, IdxId, MaskId, OpKind, Tape, Var};
