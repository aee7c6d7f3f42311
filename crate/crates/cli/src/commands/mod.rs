pub mod assoc;
pub mod data;
pub mod gan;
pub mod grid;
pub mod report;
pub mod synth;
pub mod vocab;
