//! Regenerates the bundled synthetic-face fixture.
//!
//! ```sh
//! cargo run -p degnet --example make_fixture -- crates/core/tests/fixtures/faces
//! ```

fn main() -> degnet::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "crates/core/tests/fixtures/faces".into());
    let m = degnet::synth::write_fixture(std::path::Path::new(&dir), 8, 2, 2024, (112, 96))?;
    println!("wrote {} samples to {dir}", m.records.len());
    Ok(())
}
