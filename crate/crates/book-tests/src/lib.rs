// Every chapter of the book is pulled in as the doc comment of an empty
// module, so `cargo test` compiles and runs each code listing as a doctest.
// One module per chapter keeps the failing chapter visible in test names.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/initialization.md")]
pub mod initialization {}

#[doc = include_str!("../../../book/src/bundle_adjustment.md")]
pub mod bundle_adjustment {}

#[doc = include_str!("../../../book/src/mapping.md")]
pub mod mapping {}

#[doc = include_str!("../../../book/src/physics.md")]
pub mod physics {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
