//! File formats (NIfTI-1, catalogs) and dataset materialization for the
//! protoseg3d command-line tool.

pub mod catalog;
pub mod nifti;
pub mod synthio;
