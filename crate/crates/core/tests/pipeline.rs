use icportrait::diffusion::default_schedule;
use icportrait::inference::{progressive_inference, Denoisers, FeatureConditioned, InferenceConfig};
use icportrait::masking::{build_condition, build_target};
use icportrait::matching::{argmax_flow, cost_volume, patch_descriptors, FlowField};
use icportrait::synthdata::{pair_scene, PairConfig, ViewPair};
use icportrait::tensor::split_width;
use icportrait::toynets::TargetPullDenoiser;
use icportrait::warpagg::{aggregate_residual, anneal_weights, warp_pyramid, AnnealConfig};

#[test]
fn view_pair_to_inference() {
    let cfg = PairConfig { image_size: (32, 32), ..PairConfig::default() };
    let pair = ViewPair::render(&pair_scene(9, 0, &cfg).unwrap()).unwrap();
    let (lighting, profile) = (&pair.img_a, &pair.img_b);

    let cond = build_condition(lighting, profile, 0.5, 3).unwrap();
    assert!(cond.ratio_used <= 0.5);
    let (masked, right) = split_width(&cond.cond, 32).unwrap();
    assert_eq!(&right, profile);
    assert_eq!(masked.dims(), lighting.dims());
    let target = build_target(lighting, profile).unwrap();
    assert_eq!(target.dims(), &[32, 64, 3]);

    let fl = patch_descriptors(lighting, 2, 3).unwrap();
    let fp = patch_descriptors(profile, 2, 3).unwrap();
    let flows: Vec<FlowField> = fl.levels().iter().zip(fp.levels()).map(|(a, b)| argmax_flow(&cost_volume(a, b).unwrap())).collect();
    let weights = anneal_weights(&AnnealConfig { levels: 2, ..AnnealConfig::default() }).unwrap();
    let agg = aggregate_residual(&fl, &warp_pyramid(&fp, &flows).unwrap(), &weights).unwrap();

    let sched = default_schedule();
    let pull = TargetPullDenoiser::new(profile.clone(), sched.clone());
    let model = FeatureConditioned::new(&pull, &agg).unwrap();
    assert_eq!(model.embedding().len(), 2 * 27);
    let (out, trace) = progressive_inference(lighting, Denoisers::towards(&model), &InferenceConfig::default(), &sched, Some(profile)).unwrap();
    let start = lighting.rms_distance(profile).unwrap();
    assert!(out.rms_distance(profile).unwrap() < start);
    assert_eq!(trace.iterations.len(), 3);
}
