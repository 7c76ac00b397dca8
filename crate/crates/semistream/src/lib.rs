//! Host side of the semistream simulator: model packages on disk, image
//! decoding, a threaded stream runner, verification suites and reports.

pub mod concurrent;
pub mod image;
pub mod package;
pub mod report;
pub mod verify;
