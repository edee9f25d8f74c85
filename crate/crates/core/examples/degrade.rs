//! Degrades one synthetic face with a fixed and a sampled pipeline and
//! prints the parameter manifests.
use dfdnet::degradation::{apply_degradation, sample_degradation, DegradationParams, KernelSpec};
use dfdnet::imaging::resize_bicubic;
use dfdnet::synth::synth_face;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dfdnet::Result<()> {
    let (face, _) = synth_face(128, 7);
    face.save("degrade_hq.png")?;

    let fixed = DegradationParams {
        kernel: "gaussian:2.0".parse::<KernelSpec>()?.kernel()?,
        downsample: 4.0,
        noise_sigma: 8.0,
        jpeg_quality: Some(60),
        noise_seed: 1,
    };
    let sampled = sample_degradation(&mut ChaCha8Rng::seed_from_u64(3));

    for (name, params) in [("fixed", fixed), ("sampled", sampled)] {
        let lq = apply_degradation(&face, &params)?;
        println!("# {name}: {}x{}\n{}", lq.height(), lq.width(), params.to_manifest());
        resize_bicubic(&lq, 128, 128).save(format!("degrade_{name}.png"))?;
    }
    Ok(())
}
