//! Builds component dictionaries from synthetic faces with a toy encoder,
//! writes them to disk and reads them back.
use candle_core::{DType, Device};
use dfdnet::dictionary::{build_dictionary, load_dictionary, save_dictionary};
use dfdnet::features::{Encoder, EncoderConfig};
use dfdnet::synth::synth_faces;

fn main() -> dfdnet::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "toy_dict".into());
    let encoder = Encoder::random(EncoderConfig::toy(), 1, DType::F32, &Device::Cpu)?;
    let faces = synth_faces(64, 64, 2);
    let set = build_dictionary(&faces, &encoder, 8, 0)?;
    save_dictionary(&set, &dir)?;

    let back = load_dictionary(&dir)?;
    println!("K={} encoder={} samples={}", back.k(), back.encoder_hash(), back.manifest().sample_count);
    for d in back.iter() {
        println!("scale {} {:<9} {:?}", d.scale(), d.component().name(), d.dims());
    }
    Ok(())
}
