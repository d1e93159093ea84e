pub mod clock;
pub mod message;
pub mod config;
pub mod context;
pub mod engine;
pub mod services;
pub mod recording;
pub mod testkit;
pub mod kernel;
pub mod transport;
pub mod sim;
