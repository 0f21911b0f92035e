//! A teacher trained on the noiseless, zero-lead world, checked against
//! closed-form Gaussian oracles.

use dsrt::flow::*;
use dsrt::masks::{BlockLayout, Visibility};
use dsrt::model::{init_params, predict, Init, Joint, Mode, ModelConfig};
use dsrt::numerics::optim::ParamStore;
use dsrt::numerics::{Rng, Tensor};
use dsrt::synthworld::{Clip, World, WorldConfig};
use nalgebra::{DMatrix, SymmetricEigen};

const FRAMES: usize = 8;

fn world() -> World {
    World::new(WorldConfig {
        num_frames: FRAMES,
        lead_delta: 0,
        obs_noise: 0.0,
        num_conditions: 2,
        ..Default::default()
    })
    .unwrap()
}

fn teacher_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        dim: 32,
        heads: 4,
        cond_vocab: 2,
        mode: Mode::Bidirectional,
        ..Default::default()
    }
}

/// Covariance eigen-decomposition of the flattened `[video; audio]` clip of
/// one condition. The clip is linear in the audio, which is an AR(1) process
/// per channel with unit marginal variance.
fn clip_covariance(world: &World, condition: usize) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let cfg = world.config();
    let (na, da, dv) = (cfg.num_tokens(), cfg.d_a, cfg.d_v);
    let (nv_el, na_el) = (FRAMES * dv, na * da);
    let mut m = DMatrix::<f64>::zeros(nv_el + na_el, na_el);
    for j in 0..na_el {
        let basis = Tensor::from_fn(vec![na, da], |i| if i == j { 1.0 } else { 0.0 });
        let video = world.video_signal(&basis, condition).unwrap();
        for (i, &x) in video.data().iter().enumerate() {
            m[(i, j)] = x;
        }
        m[(nv_el + j, j)] = 1.0;
    }
    let rho = cfg.ar_coeff;
    let sigma_a = DMatrix::<f64>::from_fn(na_el, na_el, |p, q| {
        let (sp, kp) = (p / da, p % da);
        let (sq, kq) = (q / da, q % da);
        if kp == kq {
            rho.powi((sp as i64 - sq as i64).unsigned_abs() as i32)
        } else {
            0.0
        }
    });
    SymmetricEigen::new(&m * sigma_a * m.transpose())
}

/// Per-stream velocity MMSE at time `t`: the trace of each block of
/// `U diag(λ / ((1-t)²λ + t²)) Uᵀ`, divided by the block size.
fn velocity_mmse(eig: &SymmetricEigen<f64, nalgebra::Dyn>, t: f64, video_elems: usize) -> (f64, f64) {
    let n = eig.eigenvalues.len();
    let f: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            let l = l.max(0.0);
            l / ((1.0 - t).powi(2) * l + t * t)
        })
        .collect();
    let diag = |i: usize| (0..n).map(|k| eig.eigenvectors[(i, k)].powi(2) * f[k]).sum::<f64>();
    let v = (0..video_elems).map(diag).sum::<f64>() / video_elems as f64;
    let a = (video_elems..n).map(diag).sum::<f64>() / (n - video_elems) as f64;
    (v, a)
}

fn train_teacher(world: &World, layout: &BlockLayout) -> ParamStore<f64> {
    let cfg = teacher_config();
    let clips = world.generate(1, 512).unwrap();
    let train = TrainConfig {
        steps: 5000,
        batch: 8,
        ..Default::default()
    };
    let out = train_flow(
        &cfg,
        init_params(&cfg, 1, Init::Standard).unwrap(),
        &clips,
        layout,
        &FlowConfig::default(),
        &train,
        1,
        |_| true,
        |_| {},
    )
    .unwrap();
    assert_eq!(out.diverged_at, None);
    out.params
}

fn velocity_excess(world: &World, params: &ParamStore<f64>, vis: &Visibility, held: &[Clip]) -> (f64, f64) {
    let cfg = teacher_config();
    let eigs: Vec<_> = (0..2).map(|c| clip_covariance(world, c)).collect();
    let times = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let mut rng = Rng::new(404, 0);
    let (mut ev, mut ea) = (0.0, 0.0);
    for clip in held {
        for &t in &times {
            let e_v: Tensor<f64> = rng.normal_tensor(clip.video.shape().to_vec(), 1.0);
            let e_a: Tensor<f64> = rng.normal_tensor(clip.audio.shape().to_vec(), 1.0);
            let x = Joint::at_time(noise(&clip.video, &e_v, t).unwrap(), noise(&clip.audio, &e_a, t).unwrap(), t);
            let (pv, pa) = predict(&cfg, params, &x, clip.condition_id, vis).unwrap();
            let (mv, ma) = velocity_mmse(&eigs[clip.condition_id], t, clip.video.numel());
            ev += pv.mse(&velocity_target(&clip.video, &e_v).unwrap()) - mv;
            ea += pa.mse(&velocity_target(&clip.audio, &e_a).unwrap()) - ma;
        }
    }
    let n = (held.len() * times.len()) as f64;
    (ev / n, ea / n)
}

#[test]
fn trained_teacher_against_gaussian_oracles() {
    let world = world();
    let layout = BlockLayout::new(1, 5, FRAMES, 0).unwrap();
    let vis = Visibility::bidirectional(layout);
    let params = train_teacher(&world, &layout);
    let cfg = teacher_config();
    let held = world.generate(77, 64).unwrap();

    // Held-out velocity error of the joint latent above the Bayes-optimal
    // velocity error, pooled over all elements.
    let (ev, ea) = velocity_excess(&world, &params, &vis, &held);
    let (nv, na) = (held[0].video.numel() as f64, held[0].audio.numel() as f64);
    let pooled = (ev * nv + ea * na) / (nv + na);
    println!("velocity excess over MMSE: joint {pooled:.4} (video {ev:.4}, audio {ea:.4})");
    assert!(pooled < 0.05, "excess {pooled}");

    // Invert each held-out clip to noise and regenerate it: the round trip
    // improves as the step count grows.
    let mut medians = Vec::new();
    for steps in [4, 8, 16, 32] {
        let mut errs: Vec<f64> = held
            .iter()
            .map(|c| {
                let field = |x: &Joint<f64>| predict(&cfg, &params, x, c.condition_id, &vis);
                let x0 = Joint::at_time(c.video.clone(), c.audio.clone(), 0.0);
                let z = euler_invert(x0, steps, field).unwrap();
                let back = euler_sample(z, &uniform_grid(steps), None, field).unwrap();
                back.video.mse(&c.video) + back.audio.mse(&c.audio)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(0.5 * (errs[31] + errs[32]));
    }
    println!("round-trip median MSE for N=4,8,16,32: {medians:?}");
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");

    // Samples carry the world's lag.
    let hits = (0..100)
        .filter(|&i| {
            let c = i % 2;
            let x = sample(&cfg, &params, &vis, 32, c, 1000 + i as u64, None).unwrap();
            world.sync_lag(&x.video, &x.audio, c).unwrap().lag == 0
        })
        .count();
    println!("samples at the true lag: {hits}/100");
    assert!(hits >= 90);
}
