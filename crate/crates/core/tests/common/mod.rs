#![allow(dead_code)]

pub mod benchmark;
pub mod criteria;
pub mod oracles;
