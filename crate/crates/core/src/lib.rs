//! Few-shot personalized localization toolkit.
//!
//! Builds n-shot localization conversations from object-tracking and
//! segmentation annotations, queries chat-style vision-language endpoints
//! (or deterministic simulated models), and scores the answers with both the
//! standard IoU and a copy-aware contextual IoU that discounts predictions
//! overlapping the in-context shot boxes.

pub mod cli;
pub mod convo;
pub mod evalengine;
pub mod geometry;
pub mod inference;
pub mod ingest;
pub mod prompts;
pub mod respparse;

pub use geometry::{BBox, Space};
