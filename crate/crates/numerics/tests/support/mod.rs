#![allow(dead_code)]
pub mod adafactor_ref;
pub mod fd;
