//! Core of the ENTROPY energy-awareness platform: context broker, time-series
//! store, stream processing, composite entities, semantic fusion, the
//! personalised recommender and analytics, tied together by [`platform::Platform`].

pub mod analytics;
pub mod broker;
pub mod composite;
pub mod fusion;
pub mod outlier;
pub mod platform;
pub mod recommender;
pub mod stream;
pub mod time;
pub mod timeseries;
pub mod value;

pub use time::{Clock, SimClock, Span, SystemClock, Timestamp};
pub use value::{Comparator, Quality, Scalar};
