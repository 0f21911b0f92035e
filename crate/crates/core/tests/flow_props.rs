use dsrt::flow::*;
use dsrt::masks::{BlockLayout, Visibility};
use dsrt::model::{init_params, Init, Joint, Mode, ModelConfig};
use dsrt::numerics::graph::Graph;
use dsrt::numerics::{Rng, Tensor};
use dsrt::synthworld::{World, WorldConfig};
use proptest::prelude::*;

fn joint_noise(frames: usize, r: usize, d: usize, seed: u64) -> Joint<f64> {
    let mut rng = Rng::new(seed, 1);
    Joint::at_time(
        rng.normal_tensor(vec![frames, d], 1.0),
        rng.normal_tensor(vec![frames * r, d], 1.0),
        1.0,
    )
}

// Per-column variances of an independent Gaussian source, from 0.1 to 1.
fn column_variances(d: usize) -> Vec<f64> {
    (0..d).map(|j| 0.1 * 10f64.powf(j as f64 / (d - 1) as f64)).collect()
}

fn gaussian_velocity(x: &Tensor<f64>, t: f64, lambda: &[f64]) -> Tensor<f64> {
    let c = x.cols();
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let l = lambda[i % c];
        x.data()[i] * (t - (1.0 - t) * l) / ((1.0 - t).powi(2) * l + t * t)
    })
}

#[test]
fn noise_midpoint_example() {
    let x0 = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
    let eps = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    assert_eq!(noise(&x0, &eps, 0.5).unwrap().data(), &[1.0]);
    assert!(noise(&x0, &eps, 1.5).is_err());
}

#[test]
fn point_mass_velocity_is_recovered_exactly() {
    let target = joint_noise(3, 2, 4, 11);
    let x1 = joint_noise(3, 2, 4, 12);
    for steps in [1, 4, 32] {
        let out = euler_sample(x1.clone(), &uniform_grid(steps), None, |x| {
            let t = x.video_times[0];
            Ok((
                x.video.zip_map(&target.video, "v", |a, b| (a - b) / t)?,
                x.audio.zip_map(&target.audio, "v", |a, b| (a - b) / t)?,
            ))
        })
        .unwrap();
        assert!(out.video.max_abs_diff(&target.video) <= 1e-6, "N={steps}");
        assert!(out.audio.max_abs_diff(&target.audio) <= 1e-6, "N={steps}");
    }
}

#[test]
fn gaussian_source_64_steps_within_tolerance() {
    let lambda = column_variances(6);
    let x1 = joint_noise(4, 3, 6, 5);
    let out = euler_sample(x1.clone(), &uniform_grid(64), None, |x| {
        let t = x.video_times[0];
        Ok((gaussian_velocity(&x.video, t, &lambda), gaussian_velocity(&x.audio, t, &lambda)))
    })
    .unwrap();
    let c = 6;
    let exact = |x: &Tensor<f64>| Tensor::from_fn(x.shape().to_vec(), |i| lambda[i % c].sqrt() * x.data()[i]);
    let (ev, ea) = (out.video.mse(&exact(&x1.video)), out.audio.mse(&exact(&x1.audio)));
    assert!(ev <= 1e-3 && ea <= 1e-3, "{ev} {ea}");
}

#[test]
fn inversion_then_sampling_returns_for_exact_field() {
    let lambda = column_variances(4);
    let field = |x: &Joint<f64>| {
        let t = x.video_times[0];
        Ok((gaussian_velocity(&x.video, t, &lambda), gaussian_velocity(&x.audio, t, &lambda)))
    };
    let mut x0 = joint_noise(2, 2, 4, 3);
    x0.video_times.iter_mut().for_each(|t| *t = 0.0);
    x0.audio_times.iter_mut().for_each(|t| *t = 0.0);
    let mut errs = Vec::new();
    let mut last = f64::INFINITY;
    for steps in [4, 8, 16, 32, 64] {
        let z = euler_invert(x0.clone(), steps, field).unwrap();
        let back = euler_sample(z, &uniform_grid(steps), None, field).unwrap();
        let err = back.video.mse(&x0.video) + back.audio.mse(&x0.audio);
        assert!(err <= last, "N={steps}: {err} > {last}");
        last = err;
        errs.push(err);
    }
    // First-order integrator: squared error falls roughly with 1/N².
    assert!(16.0 * errs[4] < errs[0], "{errs:?}");
}

#[test]
fn zero_head_loss_is_mean_square_of_target() {
    let world = World::new(WorldConfig {
        num_frames: 4,
        num_conditions: 2,
        ..Default::default()
    })
    .unwrap();
    let clips = world.generate(2, 6).unwrap();
    let cfg = ModelConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        cond_vocab: 2,
        mode: Mode::Bidirectional,
        ..Default::default()
    };
    let params = init_params(&cfg, 1, Init::Standard).unwrap();
    let layout = BlockLayout::new(1, 5, 4, 1).unwrap();
    let mut rng = Rng::new(4, 0);
    for clip in &clips {
        let view = make_view(clip, &layout, &FlowConfig::default(), &mut rng).unwrap();
        let tv = velocity_target(&view.x0.video, &view.eps.video).unwrap();
        let ta = velocity_target(&view.x0.audio, &view.eps.audio).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| true).unwrap();
        let vis = Visibility::bidirectional(layout);
        let (_, cv, ca) = velocity_loss(&mut g, &cfg, &bound, &view, &vis, clip.condition_id, (&tv, &ta), (1.0, 1.0)).unwrap();
        let oracle = |t: &Tensor<f64>, times: &[f64]| {
            let c = t.cols();
            let rows: Vec<usize> = (0..t.rows()).filter(|&i| times[i] > 0.0).collect();
            if rows.is_empty() {
                return 0.0;
            }
            rows.iter().map(|&i| t.row(i).iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / (rows.len() * c) as f64
        };
        assert!((cv - oracle(&tv, &view.xt.video_times)).abs() <= 1e-12);
        assert!((ca - oracle(&ta, &view.xt.audio_times)).abs() <= 1e-12);
    }
}

#[test]
fn training_is_seed_deterministic() {
    let world = World::new(WorldConfig {
        num_frames: 4,
        num_conditions: 2,
        ..Default::default()
    })
    .unwrap();
    let clips = world.generate(1, 16).unwrap();
    let cfg = ModelConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        cond_vocab: 2,
        mode: Mode::Bidirectional,
        ..Default::default()
    };
    let layout = BlockLayout::new(1, 5, 4, 1).unwrap();
    let train = TrainConfig {
        steps: 6,
        batch: 2,
        ..Default::default()
    };
    let run = || {
        let init = init_params(&cfg, 3, Init::Standard).unwrap();
        train_flow(&cfg, init, &clips, &layout, &FlowConfig::default(), &train, 9, |_| true, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.params.hash_prefix(""), b.params.hash_prefix(""));
}

#[test]
fn sampler_rejects_zero_steps_and_bad_grids() {
    let cfg = ModelConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        cond_vocab: 2,
        ..Default::default()
    };
    let params = init_params(&cfg, 1, Init::Standard).unwrap();
    let vis = Visibility::bidirectional(BlockLayout::new(1, 5, 2, 0).unwrap());
    assert!(sample(&cfg, &params, &vis, 0, 0, 1, None).is_err());
    let flow = FlowConfig {
        student_grid: vec![1.0, 0.5, 0.75],
        ..Default::default()
    };
    assert!(flow.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn interpolation_endpoints(seed in 0u64..1000, t in 0.0f64..=1.0) {
        let mut rng = Rng::new(seed, 0);
        let x0: Tensor<f64> = rng.normal_tensor(vec![3, 2], 1.0);
        let eps: Tensor<f64> = rng.normal_tensor(vec![3, 2], 1.0);
        prop_assert_eq!(noise(&x0, &eps, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(noise(&x0, &eps, 1.0).unwrap(), eps.clone());
        // The clean estimate inverts noising exactly for the target velocity.
        let xt = noise(&x0, &eps, t).unwrap();
        let v = velocity_target(&x0, &eps).unwrap();
        prop_assert!(denoise(&xt, &v, t).unwrap().max_abs_diff(&x0) <= 1e-12);
    }
}
