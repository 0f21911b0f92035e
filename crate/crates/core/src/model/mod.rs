//! Dual-stream transformer over one-token-per-frame video and
//! `r`-tokens-per-frame audio.
//!
//! Each fusion layer runs, per stream: modulated self-attention,
//! cross-attention to condition tokens, then cross-modal attention (video
//! queries audio, then audio queries the updated video), then a modulated
//! MLP. Modulation comes from a per-token embedding of the flow time plus a
//! condition embedding, so video and audio tokens may carry different times.
//!
//! [`forward`] evaluates a *segment*: any set of query positions, with
//! optional cached keys and values of earlier committed positions. A full
//! clip is a segment with an empty cache.

pub mod cache;
pub mod config;
pub mod params;

pub use cache::{KvCache, LayerKv};
pub use config::{Mode, ModelConfig, Positional};
pub use params::{init_params, is_audio_param, is_video_param, load_model, save_model, Init};

use crate::error::{Error, Result};
use crate::masks::{Mask, MaskSet, Visibility};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::Bound;
use crate::numerics::tensor::{Scalar, Tensor};

/// Query positions and latents of one forward evaluation.
#[derive(Clone, Debug)]
pub struct Segment {
    /// `n_v × d_v` latent.
    pub video: Var,
    /// Absolute frame index of each video row.
    pub video_frames: Vec<usize>,
    pub video_times: Vec<f64>,
    /// `n_a × d_a` latent.
    pub audio: Var,
    /// Absolute token index of each audio row.
    pub audio_tokens: Vec<usize>,
    pub audio_times: Vec<f64>,
    pub condition: usize,
}

pub struct SegmentOutput<T: Scalar> {
    /// Velocity prediction, shaped like the video latent.
    pub video: Var,
    pub audio: Var,
    /// Keys and values of this segment's positions, per layer.
    pub kv: Vec<LayerKv<T>>,
}

/// Masks for `seg` reading keys from `cache` followed by its own positions.
pub fn segment_masks<T: Scalar>(vis: &Visibility, seg: &Segment, cache: Option<&KvCache<T>>) -> MaskSet {
    let (mut vk, mut ak) = match cache {
        Some(c) => (c.video_positions(), c.audio_positions()),
        None => (Vec::new(), Vec::new()),
    };
    vk.extend_from_slice(&seg.video_frames);
    ak.extend_from_slice(&seg.audio_tokens);
    MaskSet::for_indices(vis, &seg.video_frames, &seg.audio_tokens, &vk, &ak)
}

fn sinusoid_table<T: Scalar>(values: &[f64], dim: usize, base: f64, scale: f64) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(vec![values.len(), dim], |idx| {
        let (row, col) = (idx / dim, idx % dim);
        if col >= 2 * half {
            return T::zero();
        }
        let i = col % half;
        let freq = base.powf(-(i as f64) / half as f64);
        let arg = scale * values[row] * freq;
        T::from_f64(if col < half { arg.cos() } else { arg.sin() })
    })
}

struct StreamCtx {
    name: &'static str,
    h: Var,
    cond: Var,
    phases: Vec<f64>,
}

struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    p: &'a Bound,
    cfg: &'a ModelConfig,
}

impl<T: Scalar> Ctx<'_, T> {
    fn w(&self, name: &str) -> Result<Var> {
        self.p.get(name)
    }

    fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let w = self.w(w)?;
        let b = b.map(|b| self.w(b)).transpose()?;
        self.g.linear(x, w, b)
    }

    fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let one_plus = self.g.add_scalar(scale, T::one())?;
        let y = self.g.mul(x, one_plus)?;
        self.g.add(y, shift)
    }

    fn rope(&mut self, x: Var, phases: &[f64]) -> Result<Var> {
        match self.cfg.positional {
            Positional::Rotary => self.g.rotary(x, phases, self.cfg.heads, self.cfg.rope_base),
            Positional::Sinusoidal => Ok(x),
        }
    }

    /// Per-token conditioning vector `silu(time_mlp(sin(t)) + emb[c])`.
    fn conditioning(&mut self, s: &str, times: &[f64], condition: usize) -> Result<Var> {
        let d = self.cfg.dim;
        let e = self.g.constant(sinusoid_table(times, d, 10_000.0, 1000.0))?;
        let h = self.linear(e, &format!("{s}.time.w1"), Some(&format!("{s}.time.b1")))?;
        let h = self.g.silu(h)?;
        let h = self.linear(h, &format!("{s}.time.w2"), Some(&format!("{s}.time.b2")))?;
        let table = self.w(&format!("{s}.cond.emb"))?;
        let ce = self.g.gather_rows(table, &vec![condition; times.len()])?;
        let sum = self.g.add(h, ce)?;
        self.g.silu(sum)
    }

    /// Multi-head attention of `xq` over keys projected from `xkv`,
    /// preceded by cached keys and values. Returns the output projection and
    /// this call's own (rotated) keys and values.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &mut self,
        prefix: &str,
        xq: Var,
        xkv: Var,
        q_phase: Option<&[f64]>,
        k_phase: Option<&[f64]>,
        cached: Option<(&Tensor<T>, &Tensor<T>)>,
        mask: Option<&Mask>,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let q = self.linear(xq, &format!("{prefix}.wq"), None)?;
        let k = self.linear(xkv, &format!("{prefix}.wk"), None)?;
        let v = self.linear(xkv, &format!("{prefix}.wv"), None)?;
        let q = match q_phase {
            Some(ph) => self.rope(q, ph)?,
            None => q,
        };
        let k = match k_phase {
            Some(ph) => self.rope(k, ph)?,
            None => k,
        };
        let (k_cur, v_cur) = (self.g.value(k).clone(), self.g.value(v).clone());
        let (keys, values) = match cached {
            Some((ck, cv)) if ck.rows() > 0 => {
                let ck = self.g.constant(ck.clone())?;
                let cv = self.g.constant(cv.clone())?;
                (self.g.concat_rows(&[ck, k])?, self.g.concat_rows(&[cv, v])?)
            }
            _ => (k, v),
        };
        let a = self.g.attention(q, keys, values, self.cfg.heads, mask)?;
        let out = self.linear(a, &format!("{prefix}.wo"), None)?;
        Ok((out, k_cur, v_cur))
    }

    fn gated_residual(&mut self, h: Var, gate: Var, y: Var) -> Result<Var> {
        let gy = self.g.mul(gate, y)?;
        self.g.add(h, gy)
    }

    fn chunks(&mut self, m: Var, n: usize) -> Result<Vec<Var>> {
        let d = self.cfg.dim;
        (0..n).map(|i| self.g.slice_cols(m, i * d, (i + 1) * d)).collect()
    }
}

/// Evaluates the model on `seg`. Keys are `cache` positions followed by the
/// segment's own positions; `masks` must be laid out accordingly (see
/// [`segment_masks`]).
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &Bound,
    seg: &Segment,
    masks: &MaskSet,
    cache: Option<&KvCache<T>>,
) -> Result<SegmentOutput<T>> {
    let (nv, na) = (seg.video_frames.len(), seg.audio_tokens.len());
    if g.value(seg.video).shape() != [nv, cfg.d_v] || g.value(seg.audio).shape() != [na, cfg.d_a] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: g.value(seg.video).shape().to_vec(),
            right: g.value(seg.audio).shape().to_vec(),
        });
    }
    if seg.video_times.len() != nv || seg.audio_times.len() != na {
        return Err(Error::InvalidArgument("one flow time per latent row is required".into()));
    }
    if seg.condition >= cfg.cond_vocab {
        return Err(Error::InvalidArgument(format!("condition {} outside vocabulary", seg.condition)));
    }
    let (cv, ca) = match cache {
        Some(c) => {
            c.validate()?;
            if c.layers().len() != cfg.depth {
                return Err(Error::Cache(format!("cache has {} layers, model {}", c.layers().len(), cfg.depth)));
            }
            (c.len_frames(), c.len_frames() * cfg.tokens_per_frame)
        }
        None => (0, 0),
    };
    let want = |m: &Mask, q: usize, k: usize| m.query_len() == q && m.key_len() == k;
    if !(want(&masks.video_self, nv, cv + nv)
        && want(&masks.audio_self, na, ca + na)
        && want(&masks.video_from_audio, nv, ca + na)
        && want(&masks.audio_from_video, na, cv + nv))
    {
        return Err(Error::Layout("mask shapes do not match the segment and cache".into()));
    }

    let mut cx = Ctx { g, p: params, cfg };
    let d = cfg.dim;
    let mut streams = Vec::with_capacity(2);
    for (name, x, times, phases) in [
        (
            "video",
            seg.video,
            &seg.video_times,
            seg.video_frames.iter().map(|&f| cfg.video_phase(f)).collect::<Vec<_>>(),
        ),
        (
            "audio",
            seg.audio,
            &seg.audio_times,
            seg.audio_tokens.iter().map(|&s| cfg.audio_phase(s)).collect::<Vec<_>>(),
        ),
    ] {
        let mut h = cx.linear(x, &format!("{name}.in.w"), Some(&format!("{name}.in.b")))?;
        if cfg.positional == Positional::Sinusoidal {
            let pe = cx.g.constant(sinusoid_table(&phases, d, cfg.rope_base, 1.0))?;
            h = cx.g.add(h, pe)?;
        }
        let cond = cx.conditioning(name, times, seg.condition)?;
        streams.push(StreamCtx { name, h, cond, phases });
    }
    let [mut vs, mut au]: [StreamCtx; 2] = streams.try_into().map_err(|_| Error::Layout("streams".into()))?;

    let mut kvs = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let layer_cache = cache.map(|c| &c.layers()[l]);
        let mut mods = Vec::with_capacity(2);
        let mut self_kv = Vec::with_capacity(2);
        for (st, mask) in [(&mut vs, &masks.video_self), (&mut au, &masks.audio_self)] {
            let p = format!("{}.l{l}", st.name);
            let m = cx.linear(st.cond, &format!("{p}.mod.w"), Some(&format!("{p}.mod.b")))?;
            let m = cx.chunks(m, 6)?;
            let x = cx.g.layer_norm(st.h)?;
            let x = cx.modulate(x, m[0], m[1])?;
            let cached = layer_cache.map(|lc| {
                if st.name == "video" {
                    (&lc.video_self_k, &lc.video_self_v)
                } else {
                    (&lc.audio_self_k, &lc.audio_self_v)
                }
            });
            let ph = st.phases.clone();
            let (y, k, v) = cx.attend(&format!("{p}.self"), x, x, Some(&ph), Some(&ph), cached, Some(mask))?;
            st.h = cx.gated_residual(st.h, m[2], y)?;
            mods.push(m);
            self_kv.push((k, v));
        }
        for st in [&mut vs, &mut au] {
            let p = format!("{}.l{l}.cond", st.name);
            let table = cx.w(&format!("{}.cond.tokens", st.name))?;
            let rows: Vec<usize> = (seg.condition * cfg.cond_tokens..(seg.condition + 1) * cfg.cond_tokens).collect();
            let tokens = cx.g.gather_rows(table, &rows)?;
            let x = cx.g.layer_norm(st.h)?;
            let (y, _, _) = cx.attend(&p, x, tokens, None, None, None, None)?;
            st.h = cx.g.add(st.h, y)?;
        }
        let xa = cx.g.layer_norm(au.h)?;
        let xv = cx.g.layer_norm(vs.h)?;
        let (y, vck, vcv) = cx.attend(
            &format!("video.l{l}.cross"),
            xv,
            xa,
            Some(&vs.phases),
            Some(&au.phases),
            layer_cache.map(|lc| (&lc.v_cross_k, &lc.v_cross_v)),
            Some(&masks.video_from_audio),
        )?;
        vs.h = cx.g.add(vs.h, y)?;
        let xv = cx.g.layer_norm(vs.h)?;
        let (y, ack, acv) = cx.attend(
            &format!("audio.l{l}.cross"),
            xa,
            xv,
            Some(&au.phases),
            Some(&vs.phases),
            layer_cache.map(|lc| (&lc.a_cross_k, &lc.a_cross_v)),
            Some(&masks.audio_from_video),
        )?;
        au.h = cx.g.add(au.h, y)?;
        for (st, m) in [(&mut vs, &mods[0]), (&mut au, &mods[1])] {
            let p = format!("{}.l{l}.mlp", st.name);
            let x = cx.g.layer_norm(st.h)?;
            let x = cx.modulate(x, m[3], m[4])?;
            let y = cx.linear(x, &format!("{p}.w1"), Some(&format!("{p}.b1")))?;
            let y = cx.g.gelu(y)?;
            let y = cx.linear(y, &format!("{p}.w2"), Some(&format!("{p}.b2")))?;
            st.h = cx.gated_residual(st.h, m[5], y)?;
        }
        let [(vsk, vsv), (ask, asv)]: [(Tensor<T>, Tensor<T>); 2] = self_kv.try_into().map_err(|_| Error::Layout("self kv".into()))?;
        kvs.push(LayerKv {
            video_self_k: vsk,
            video_self_v: vsv,
            audio_self_k: ask,
            audio_self_v: asv,
            v_cross_k: vck,
            v_cross_v: vcv,
            a_cross_k: ack,
            a_cross_v: acv,
        });
    }

    let mut outs = Vec::with_capacity(2);
    for st in [&vs, &au] {
        let s = st.name;
        let m = cx.linear(st.cond, &format!("{s}.head.mod.w"), Some(&format!("{s}.head.mod.b")))?;
        let m = cx.chunks(m, 2)?;
        let x = cx.g.layer_norm(st.h)?;
        let x = cx.modulate(x, m[0], m[1])?;
        outs.push(cx.linear(x, &format!("{s}.out.w"), Some(&format!("{s}.out.b")))?);
    }
    Ok(SegmentOutput {
        video: outs[0],
        audio: outs[1],
        kv: kvs,
    })
}

/// Whole-clip latent pair with per-row flow times.
#[derive(Clone, Debug)]
pub struct Joint<T: Scalar = f64> {
    pub video: Tensor<T>,
    pub audio: Tensor<T>,
    pub video_times: Vec<f64>,
    pub audio_times: Vec<f64>,
}

impl<T: Scalar> Joint<T> {
    /// Shared scalar time on every row.
    pub fn at_time(video: Tensor<T>, audio: Tensor<T>, t: f64) -> Self {
        let (nv, na) = (video.rows(), audio.rows());
        Self {
            video,
            audio,
            video_times: vec![t; nv],
            audio_times: vec![t; na],
        }
    }
}

/// Adds a whole clip to `g` as a segment starting at frame 0.
pub fn clip_segment<T: Scalar>(g: &mut Graph<T>, x: &Joint<T>, condition: usize, differentiable: bool) -> Result<Segment> {
    let (video, audio) = if differentiable {
        (g.param(x.video.clone())?, g.param(x.audio.clone())?)
    } else {
        (g.constant(x.video.clone())?, g.constant(x.audio.clone())?)
    };
    Ok(Segment {
        video,
        video_frames: (0..x.video.rows()).collect(),
        video_times: x.video_times.clone(),
        audio,
        audio_tokens: (0..x.audio.rows()).collect(),
        audio_times: x.audio_times.clone(),
        condition,
    })
}

/// Velocity of a whole clip under `vis`, outside any training graph.
pub fn predict<T: Scalar>(
    cfg: &ModelConfig,
    params: &crate::numerics::optim::ParamStore<T>,
    x: &Joint<T>,
    condition: usize,
    vis: &Visibility,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false)?;
    let seg = clip_segment(&mut g, x, condition, false)?;
    let masks = segment_masks::<T>(vis, &seg, None);
    let out = forward(&mut g, cfg, &p, &seg, &masks, None)?;
    Ok((g.value(out.video).clone(), g.value(out.audio).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::BlockLayout;
    use crate::numerics::rng::Rng;

    fn tiny(depth: usize) -> ModelConfig {
        ModelConfig {
            depth,
            dim: 8,
            heads: 2,
            d_a: 3,
            d_v: 4,
            tokens_per_frame: 2,
            cond_vocab: 2,
            ..Default::default()
        }
    }

    fn clip(frames: usize, cfg: &ModelConfig, seed: u64) -> Joint<f64> {
        let mut rng = Rng::new(seed, 0);
        Joint::at_time(
            rng.normal_tensor(vec![frames, cfg.d_v], 1.0),
            rng.normal_tensor(vec![frames * cfg.tokens_per_frame, cfg.d_a], 1.0),
            0.4,
        )
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let cfg = tiny(2);
        let p = init_params(&cfg, 1, Init::Standard).unwrap();
        let layout = BlockLayout::new(1, 2, 3, 0).unwrap();
        let (v, a) = predict(&cfg, &p, &clip(3, &cfg, 2), 0, &Visibility::causal(layout)).unwrap();
        assert!(v.data().iter().chain(a.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn zero_depth_ignores_masks() {
        let cfg = tiny(0);
        let p = init_params(&cfg, 1, Init::Dense).unwrap();
        let layout = BlockLayout::new(1, 2, 3, 0).unwrap();
        let x = clip(3, &cfg, 2);
        let a = predict(&cfg, &p, &x, 1, &Visibility::causal(layout)).unwrap();
        let b = predict(&cfg, &p, &x, 1, &Visibility::bidirectional(layout)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_mask_shape_rejected() {
        let cfg = tiny(1);
        let p = init_params(&cfg, 1, Init::Dense).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false).unwrap();
        let seg = clip_segment(&mut g, &clip(3, &cfg, 2), 0, false).unwrap();
        let vis = Visibility::causal(BlockLayout::new(1, 2, 2, 0).unwrap());
        let masks = MaskSet::full(&vis, 2);
        assert!(forward(&mut g, &cfg, &b, &seg, &masks, None).is_err());
    }
}
