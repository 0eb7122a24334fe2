//! placeholder
pub struct Placeholder;
