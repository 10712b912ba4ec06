//! Regenerates `calibration.json`: `cargo run -p trofi-core --example calibrate > crates/core/calibration.json`
use trofi_core::envs::{calibrate, EnvKind};

fn main() {
    let entries: Vec<_> = EnvKind::ALL
        .into_iter()
        .map(|kind| calibrate(kind, 1000, 20_240_601).expect("calibration run"))
        .collect();
    println!("{}", serde_json::to_string_pretty(&entries).unwrap());
}
