//! Core library for a web-scale image-text curation pipeline: WAT parsing,
//! language bucketing, embedding-based filtering, safety tagging, dataset
//! packaging and a compressed nearest-neighbour index.

pub mod dataset_io;
pub mod embed;
pub mod knn;
pub mod langid;
pub mod tagging;
pub mod wat;
