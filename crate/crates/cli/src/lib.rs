//! Pipeline front end: configuration, the five measurement stages wired
//! to on-disk artifacts, and a self-contained offline demo.

pub mod config;
pub mod demo;
pub mod stages;
