#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod criteria;
pub mod design;
pub mod fpca;
pub mod search;
pub mod sim;
pub mod stream;
pub mod subsets;
