#![allow(dead_code)]

pub mod fixtures;
pub mod mapping_corpus;
pub mod oracle;
pub mod registry_model;
