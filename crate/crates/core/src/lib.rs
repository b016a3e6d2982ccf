pub mod backend;
pub mod cohort;
pub mod criteria;
pub mod domain;
pub mod embedding;
pub mod entity;
pub mod funnel;
pub mod generation;
pub mod heal;
pub mod kb;
pub mod llm;
pub mod metrics;
pub mod normalize;
pub mod placeholder;
pub mod retrieval;
pub mod sql_complexity;
