//! Trains the reference MLP on the two-class Gaussian-blob task and prints the
//! metrics stream.
//!
//!     cargo run --release --example train_blobs -- [serial|fused|pipeline] [SEED]

use temporal_fusion::cli::{cmd_train, EngineChoice, TrainFile};

fn main() -> temporal_fusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut file = TrainFile::parse(include_str!("../configs/blobs.conf"))?;
    if let Some(engine) = args.next() {
        file.engine = engine.parse::<EngineChoice>().map_err(temporal_fusion::Error::InvalidParameter)?;
    }
    if let Some(seed) = args.next() {
        file.train.seed = seed.parse().map_err(|_| temporal_fusion::Error::InvalidParameter(seed))?;
    }
    let summary = cmd_train(&file, &mut std::io::stdout().lock())?;
    eprintln!(
        "best accuracy {:.3} after {} epochs ({:.2} s training, {:.2} s testing)",
        summary.best_acc, summary.epochs, summary.train_time_s, summary.test_time_s
    );
    Ok(())
}
