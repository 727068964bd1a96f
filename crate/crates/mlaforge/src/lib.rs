//! Conversion of multi-head / grouped-query attention checkpoints into
//! multi-head latent attention form, plus the machinery to verify that the
//! conversion is faithful: four interchangeable attention forward paths,
//! incremental decoding over several KV-cache layouts, and exact cache-memory
//! accounting.
//!
//! The numeric core is generic over the scalar type: conversion math runs in
//! `f64`, forward passes in `f32`, and the same kernels serve both.

pub mod attention;
pub mod cachemodel;
pub mod calib;
pub mod cli;
pub mod convert;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod model;
pub mod rope;
pub mod tensorio;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, Scalar, SvdResult};

/// Conversion-path matrix (all factorization math is 64-bit).
pub type Mat64 = Matrix<f64>;
/// Forward-path matrix (inference runs 32-bit).
pub type Mat32 = Matrix<f32>;
