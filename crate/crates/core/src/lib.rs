//! Unsupervised single-image deraining with a self-reinforcing reward store.
//!
//! A derainer is trained from unpaired clean and rainy pools through a
//! generator/discriminator pair and a degradation estimation module. Once the
//! validation metrics plateau, the best derained output seen for each rainy
//! sample (as judged by a no-reference quality scorer) becomes a pseudo target.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod reward_store;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
