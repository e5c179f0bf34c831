pub mod corpus;
pub mod embedspace;
pub mod eval;
mod http;
pub mod lpr;
pub mod pipeline;
pub mod scoring;
pub mod selectors;
pub mod sim;

pub use http::API_KEY_ENV;
