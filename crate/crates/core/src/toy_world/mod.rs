//! Synthetic styled-shapes world: a 4x4 grid of (style, content) cells,
//! toy encoders for captions and images, and a rule-based oracle.

pub mod dataset;
pub mod encoders;
pub mod oracle;
pub mod render;

pub use dataset::{gen_dataset, Dataset, Sample};
pub use encoders::{caption_for, encode_image, encode_text, parse_caption};
pub use oracle::{oracle_classify, OracleLabel};
pub use render::{parse_cells, render, Cell, Placement};
