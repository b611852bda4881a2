//! Microscaling storage: E4M3 scales, bit packing and the `BBQT` container.

pub mod container;
pub mod e4m3;
pub mod pack;

pub use container::{parse_container, serialize_container, Container, Kind};
pub use pack::{pack_codes, unpack_codes, PackedCodes};
