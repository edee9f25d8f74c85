//! Trains a dictionary-transfer model and a plain one on synthetic faces,
//! then compares both against bicubic upsampling on held-out pairs.
//!
//!     cargo run --release --example train_toy -- [steps] [batch]
use dfdnet::harness::{run_toy, ToySetup};

fn main() -> dfdnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut setup = ToySetup::default();
    if let Some(s) = args.next() {
        setup.steps = s.parse().expect("steps must be an integer");
    }
    if let Some(b) = args.next() {
        setup.batch_size = b.parse().expect("batch must be an integer");
    }
    let out = run_toy(&setup, |line| println!("{line}"))?;
    println!("{}", out.summary());
    Ok(())
}
