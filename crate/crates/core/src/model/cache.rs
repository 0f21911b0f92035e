use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Keys and values of one layer for a run of consecutive positions.
///
/// Self-attention entries are projected from their own stream. Cross
/// entries are keyed by the stream they were projected from: `v_cross`
/// holds keys read by video queries (rows are audio tokens), `a_cross`
/// holds keys read by audio queries (rows are video frames).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T: Scalar = f64> {
    pub video_self_k: Tensor<T>,
    pub video_self_v: Tensor<T>,
    pub audio_self_k: Tensor<T>,
    pub audio_self_v: Tensor<T>,
    pub v_cross_k: Tensor<T>,
    pub v_cross_v: Tensor<T>,
    pub a_cross_k: Tensor<T>,
    pub a_cross_v: Tensor<T>,
}

impl<T: Scalar> LayerKv<T> {
    fn empty(dim: usize) -> Self {
        let z = || Tensor::zeros(vec![0, dim]);
        Self {
            video_self_k: z(),
            video_self_v: z(),
            audio_self_k: z(),
            audio_self_v: z(),
            v_cross_k: z(),
            v_cross_v: z(),
            a_cross_k: z(),
            a_cross_v: z(),
        }
    }

    fn video_parts(&self) -> [&Tensor<T>; 4] {
        [&self.video_self_k, &self.video_self_v, &self.a_cross_k, &self.a_cross_v]
    }

    fn audio_parts(&self) -> [&Tensor<T>; 4] {
        [&self.audio_self_k, &self.audio_self_v, &self.v_cross_k, &self.v_cross_v]
    }

    fn map_parts(&self, video: impl Fn(&Tensor<T>) -> Tensor<T>, audio: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            video_self_k: video(&self.video_self_k),
            video_self_v: video(&self.video_self_v),
            audio_self_k: audio(&self.audio_self_k),
            audio_self_v: audio(&self.audio_self_v),
            v_cross_k: audio(&self.v_cross_k),
            v_cross_v: audio(&self.v_cross_v),
            a_cross_k: video(&self.a_cross_k),
            a_cross_v: video(&self.a_cross_v),
        }
    }

    fn rows_ok(&self, frames: usize, tokens: usize) -> bool {
        self.video_parts().iter().all(|t| t.rows() == frames) && self.audio_parts().iter().all(|t| t.rows() == tokens)
    }
}

/// Rolling key/value cache of committed positions.
///
/// Holds frames `base_frame .. base_frame + len_frames` and the audio
/// tokens aligned with them. Rotary phases were applied at absolute
/// positions before caching, so eviction never re-rotates anything.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T: Scalar = f64> {
    layers: Vec<LayerKv<T>>,
    base_frame: usize,
    len_frames: usize,
    tokens_per_frame: usize,
    /// Retained frames; `None` never evicts.
    capacity_frames: Option<usize>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(depth: usize, dim: usize, tokens_per_frame: usize, capacity_frames: Option<usize>) -> Self {
        Self {
            layers: (0..depth).map(|_| LayerKv::empty(dim)).collect(),
            base_frame: 0,
            len_frames: 0,
            tokens_per_frame,
            capacity_frames,
        }
    }

    pub fn layers(&self) -> &[LayerKv<T>] {
        &self.layers
    }

    pub fn base_frame(&self) -> usize {
        self.base_frame
    }

    pub fn len_frames(&self) -> usize {
        self.len_frames
    }

    pub fn is_empty(&self) -> bool {
        self.len_frames == 0
    }

    /// One past the newest cached frame.
    pub fn end_frame(&self) -> usize {
        self.base_frame + self.len_frames
    }

    pub fn capacity_frames(&self) -> Option<usize> {
        self.capacity_frames
    }

    pub fn video_positions(&self) -> Vec<usize> {
        (self.base_frame..self.end_frame()).collect()
    }

    pub fn audio_positions(&self) -> Vec<usize> {
        let r = self.tokens_per_frame;
        (r * self.base_frame..r * self.end_frame()).collect()
    }

    /// Checks that every layer holds exactly the advertised positions.
    pub fn validate(&self) -> Result<()> {
        let tokens = self.len_frames * self.tokens_per_frame;
        for (l, kv) in self.layers.iter().enumerate() {
            if !kv.rows_ok(self.len_frames, tokens) {
                return Err(Error::Cache(format!(
                    "layer {l} does not hold {} frames and {tokens} tokens",
                    self.len_frames
                )));
            }
        }
        Ok(())
    }

    /// Appends the entries of frames `first_frame .. first_frame + frames`.
    pub fn append(&mut self, first_frame: usize, frames: usize, kvs: Vec<LayerKv<T>>) -> Result<()> {
        if first_frame != self.end_frame() {
            return Err(Error::Cache(format!(
                "append at frame {first_frame} but the cache ends at frame {}",
                self.end_frame()
            )));
        }
        if kvs.len() != self.layers.len() {
            return Err(Error::Cache(format!(
                "{} layers appended to a {}-layer cache",
                kvs.len(),
                self.layers.len()
            )));
        }
        let tokens = frames * self.tokens_per_frame;
        for (l, kv) in kvs.iter().enumerate() {
            if !kv.rows_ok(frames, tokens) {
                return Err(Error::Cache(format!("layer {l} entries do not cover {frames} frames")));
            }
        }
        for (old, new) in self.layers.iter_mut().zip(kvs) {
            let cat = |a: &Tensor<T>, b: &Tensor<T>| Tensor::concat_rows(&[a, b]);
            *old = LayerKv {
                video_self_k: cat(&old.video_self_k, &new.video_self_k)?,
                video_self_v: cat(&old.video_self_v, &new.video_self_v)?,
                audio_self_k: cat(&old.audio_self_k, &new.audio_self_k)?,
                audio_self_v: cat(&old.audio_self_v, &new.audio_self_v)?,
                v_cross_k: cat(&old.v_cross_k, &new.v_cross_k)?,
                v_cross_v: cat(&old.v_cross_v, &new.v_cross_v)?,
                a_cross_k: cat(&old.a_cross_k, &new.a_cross_k)?,
                a_cross_v: cat(&old.a_cross_v, &new.a_cross_v)?,
            };
        }
        self.len_frames += frames;
        if let Some(cap) = self.capacity_frames {
            if self.len_frames > cap {
                self.evict(cap);
            }
        }
        Ok(())
    }

    /// Keeps only the newest `keep_last_frames` frames.
    pub fn evict(&mut self, keep_last_frames: usize) {
        let keep = keep_last_frames.min(self.len_frames);
        let drop = self.len_frames - keep;
        if drop == 0 {
            return;
        }
        let r = self.tokens_per_frame;
        let (vf, af) = (self.len_frames, self.len_frames * r);
        self.layers = self
            .layers
            .iter()
            .map(|kv| kv.map_parts(|t| t.slice_rows(drop, vf), |t| t.slice_rows(drop * r, af)))
            .collect();
        self.base_frame += drop;
        self.len_frames = keep;
    }

    /// Test hook: drops the last row of one video entry so the cache is
    /// internally inconsistent.
    #[doc(hidden)]
    pub fn corrupt_for_test(&mut self) {
        if let Some(kv) = self.layers.first_mut() {
            let n = kv.video_self_k.rows();
            kv.video_self_k = kv.video_self_k.slice_rows(0, n.saturating_sub(1));
        }
    }
}
