//! Writes a synthetic 4-class fixture and its `engine.toml`.
//!
//!     cargo run -p crossret-core --example make_fixture -- /tmp/fixture [seed]

use std::path::PathBuf;

use crossret_core::synth::SynthSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixture".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let data = SynthSpec {
        seed,
        ..SynthSpec::default()
    }
    .generate()?;
    let config = data.write_to_dir(&dir)?;
    eprintln!("wrote {}", config.display());
    Ok(())
}
