//! Writes the synthetic 5-node ring used by `configs/toy.json`.
//!
//! cargo run --release -p stgncde --example make_toy -- [out_dir]

use std::path::PathBuf;

use stgncde::data::{synthetic_ring, write_dataset};

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "configs/data".into()));
    std::fs::create_dir_all(&dir).expect("create output directory");
    let ds = synthetic_ring(5, 2000, 0);
    write_dataset(&ds, &dir.join("toy.csv"), &dir.join("toy.meta.json")).expect("write dataset");
    println!("wrote {}", dir.display());
}
