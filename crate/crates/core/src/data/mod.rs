//! Deterministic synthetic dataset generators and their on-disk format.

pub mod digits;
pub mod grouping;
pub mod occ;
pub mod store;
pub mod texture;

pub use digits::{downscale_digit, DigitPool, Split};
pub use grouping::{generate_grouping_sequence, GroupingSample};
pub use occ::{generate_occ_sequence, occlusion_mask, optimal_reconstruction, render, OccSequence};
pub use store::{
    build_grouping_dataset, build_occ_dataset, build_textured_dataset, read_occ_dataset,
    sample_rng, write_occ_dataset, write_pgm, DatasetHeader, GENERATOR_VERSION,
};
pub use texture::{generate_textured_digit, TexturedDigit};
