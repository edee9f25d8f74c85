//! Scores an untrained (near identity) generator on synthetic x8 pairs and
//! prints the evaluation CSV with a custom perceptual column.
use candle_core::{DType, Device};
use dfdnet::features::{Encoder, EncoderConfig};
use dfdnet::harness::{evaluate, make_pairs, PerceptualMetric, Task};
use dfdnet::imaging::Image;
use dfdnet::restorer::{Generator, GeneratorConfig};
use dfdnet::synth::synth_faces;

/// Mean absolute gradient difference; stands in for a learned metric.
struct GradientL1;

impl PerceptualMetric for GradientL1 {
    fn name(&self) -> &str {
        "grad_l1"
    }

    fn distance(&self, a: &Image, b: &Image) -> dfdnet::Result<f64> {
        let (h, w) = (a.height(), a.width());
        let mut s = 0.0;
        for c in 0..3 {
            for y in 0..h {
                for x in 1..w {
                    let ga = a.get(c, y, x) - a.get(c, y, x - 1);
                    let gb = b.get(c, y, x) - b.get(c, y, x - 1);
                    s += (ga - gb).abs() as f64;
                }
            }
        }
        Ok(s / (3 * h * (w - 1)) as f64)
    }
}

fn main() -> dfdnet::Result<()> {
    let res = 32;
    let encoder = Encoder::random(EncoderConfig::toy(), 1, DType::F32, &Device::Cpu)?;
    let config = GeneratorConfig {
        resolution: res,
        dft_blocks: 0,
        ..Default::default()
    };
    let generator = Generator::new(config, encoder)?;
    let pairs = make_pairs(&synth_faces(6, res, 3), Task::X8, 0, res)?;
    let report = evaluate(&generator, None, &pairs, "untrained", Some(&GradientL1))?;
    print!("{}\n{}", report.to_csv(), report.summary());
    Ok(())
}
