//! Writes the two-feature sine+noise toy series used by `configs/toy.toml`.
//!
//! `cargo run -p stagediff-core --example toy_data -- configs/toy.csv [rows] [seed]`

fn main() -> stagediff::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "toy.csv".into());
    let rows = args.next().and_then(|s| s.parse().ok()).unwrap_or(1200);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    stagediff::dataio::write_series_csv(&path, &stagediff::dataio::toy_sine_series(rows, seed))?;
    println!("wrote {rows} rows to {path}");
    Ok(())
}
