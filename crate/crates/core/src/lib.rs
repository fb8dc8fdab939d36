//! Two-scale homogenization of periodic elastic composites with weakly
//! compressible, soft-in-shear inclusions.
//!
//! The crate covers the whole pipeline: boundary-fitted meshes of the
//! periodic cell and of the fine-scale composite ([`mesh`]), P2 finite
//! element assembly ([`assembly`]), sparse solvers ([`solvers`]), the
//! degenerate cell problem and effective tensor ([`cell`]), the micro Stokes
//! problem on the inclusion ([`stokes`]), the coupled limit problem and its
//! spectrum ([`limit`]), and direct fine-scale simulation used to check the
//! limit objects ([`fine`]).

pub mod assembly;
pub mod cell;
pub mod checks;
pub mod config;
pub mod element;
pub mod error;
pub mod expr;
pub mod fine;
pub mod forcing;
pub mod limit;
pub mod mesh;
pub mod quadrature;
pub mod report;
pub mod space;
pub mod stokes;
pub mod solvers;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};

/// The guide, compiled here so its examples run as doc-tests.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/cell.md")]
    pub mod cell {}
    #[doc = include_str!("../../../book/src/stokes.md")]
    pub mod stokes {}
    #[doc = include_str!("../../../book/src/limit.md")]
    pub mod limit {}
    #[doc = include_str!("../../../book/src/fine.md")]
    pub mod fine {}
    #[doc = include_str!("../../../book/src/solvers.md")]
    pub mod solvers {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
