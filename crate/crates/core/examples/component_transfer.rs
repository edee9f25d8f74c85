//! One dictionary transfer by hand: crop a component from degraded
//! features, match it against the dictionary, re-normalize the winner to
//! the input statistics and paste it back.
use candle_core::{DType, Device};
use dfdnet::dft::{cadain, feature_match};
use dfdnet::dictionary::build_dictionary;
use dfdnet::features::{component_rois, extract_features, roi_align, reverse_roi_align, Component, ComponentSizes, Encoder, EncoderConfig};
use dfdnet::harness::{make_pairs, Task};
use dfdnet::nn::channel_stats;
use dfdnet::synth::synth_faces;

fn main() -> dfdnet::Result<()> {
    let res = 64;
    let encoder = Encoder::random(EncoderConfig::toy(), 1, DType::F32, &Device::Cpu)?;
    let faces = synth_faces(48, res, 4);
    let dicts = build_dictionary(&faces[1..], &encoder, 8, 0)?;

    let pair = &make_pairs(&faces[..1], Task::X4, 9, res)?[0];
    let x = pair.lq.to_tensor(DType::F32, &Device::Cpu)?;
    let feats = extract_features(&x, &encoder, res)?;

    let (scale, comp) = (2, Component::Mouth);
    let fm = &feats[scale - 1];
    let roi = component_rois(&pair.landmarks, (res, res))?[comp.index()];
    let size = ComponentSizes::for_resolution(res).size(comp, scale);
    let crop = roi_align(fm, &[roi], (size, size))?;

    let m = feature_match(&crop, dicts.get(scale, comp))?;
    let scores: Vec<String> = m.scores[0].iter().map(|s| format!("{s:.2}")).collect();
    println!("scores [{}] -> k* = {}", scores.join(", "), m.selected_index[0]);

    let raw = dicts.get(scale, comp).tensor(DType::F32, &Device::Cpu)?.narrow(0, m.selected_index[0], 1)?;
    let cluster = dfdnet::features::ComponentFeature { component: comp, scale, data: raw };
    let moved = cadain(&cluster, &crop)?;
    let (mu_in, _) = channel_stats(&crop.data)?;
    let (mu_out, _) = channel_stats(&moved.data)?;
    let gap = (mu_in - mu_out)?.abs()?.max_keepdim(1)?.flatten_all()?.to_vec1::<f32>()?[0];
    println!("channel mean gap after CAdaIN: {gap:.2e}");

    let pasted = reverse_roi_align(fm, &moved, &[roi])?;
    let changed = fm.data.ne(&pasted.data)?.to_dtype(DType::F32)?.sum_all()?.to_scalar::<f32>()?;
    println!("{changed} of {} feature values replaced inside the {} box", fm.data.elem_count(), comp.name());
    Ok(())
}
