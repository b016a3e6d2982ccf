pub mod eval;
pub mod http;
pub mod pipeline;
pub mod sqlite;
pub mod synth;
pub mod vocab;
