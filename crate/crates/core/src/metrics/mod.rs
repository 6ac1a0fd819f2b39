//! Evaluation mathematics: PSNR, SSIM, block-matching optical flow and its
//! pairwise discrepancy, the embedding interface, and the
//! consistency-diversity score.

mod cd;
mod encoder;
mod flow;
mod quality;
mod report;

pub use cd::{cd_report, cd_score, diversity, semantic_variance, CdReport, SemanticStats};
pub use encoder::{class_prototype, embed, Embedding, ImageEncoder, ToyEncoder};
pub use flow::{block_flow, e_flow, e_flow_with, FlowField, EFLOW_BLOCK, EFLOW_RADIUS};
pub use quality::{psnr, ssim, PSNR_CAP};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} smaller than {2}x{2} window")]
    ImageTooSmall(usize, usize, usize),
    #[error("block size {block} invalid for {h}x{w} image")]
    BadBlock { block: usize, h: usize, w: usize },
    #[error("view sets have different lengths: {0} vs {1}")]
    ViewCountMismatch(usize, usize),
    #[error("degenerate embedding: feature vector has near-zero norm")]
    DegenerateEmbedding,
    #[error("semantic variance {0} below 1e-12; instance is degenerate")]
    DegenerateVariance(f64),
    #[error("no exemplars supplied")]
    EmptyExemplars,
    #[error("no instances supplied")]
    EmptyInstances,
    #[error("all {0} instances were degenerate")]
    AllInstancesDegenerate(usize),
    #[error("embedding dimensions differ: {0} vs {1}")]
    EmbeddingDimMismatch(usize, usize),
}
