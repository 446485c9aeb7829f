// SPDX-License-Identifier: Apache-2.0

pub mod backbone;
mod binfmt;
pub mod cache;
pub mod chips;
pub mod cli;
pub mod data;
pub mod error;
pub mod kernels;
pub mod report;
pub mod selection;
pub mod trainer;
