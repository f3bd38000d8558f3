//! Independent ground-truth generators and the fixture files built from
//! them.

pub mod fixtures;
pub mod micro;
