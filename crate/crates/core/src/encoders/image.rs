//! Convolutional image codec with max-pool index bypass.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, Linear};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageCodecConfig {
    pub channels: usize,
    pub patch_px: usize,
    pub d: usize,
    /// Pool factor per stage; their product must equal `patch_px`.
    pub pools: Vec<usize>,
    pub activation: Activation,
    /// Unpool at the encoder's argmax positions; otherwise top-left.
    pub bypass: bool,
}

impl ImageCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.d == 0 || self.pools.is_empty() {
            return Err(Error::Config("image codec needs channels, d and at least one pool stage".into()));
        }
        if self.pools.contains(&0) || self.pools.iter().product::<usize>() != self.patch_px {
            return Err(Error::Config(format!(
                "pool factors {:?} do not collapse a {} px patch",
                self.pools, self.patch_px
            )));
        }
        Ok(())
    }

    /// Channel widths before/after each stage, ramping geometrically from
    /// `channels` to `d`.
    pub fn widths(&self) -> Vec<usize> {
        let s = self.pools.len();
        let ratio = self.d as f64 / self.channels as f64;
        (0..=s)
            .map(|i| match i {
                0 => self.channels,
                i if i == s => self.d,
                i => ((self.channels as f64) * ratio.powf(i as f64 / s as f64)).round().max(1.0) as usize,
            })
            .collect()
    }
}

/// Per-stage argmax maps of one encoding run over `n` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolTrace {
    pub n: usize,
    pub stages: Vec<StageTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub channels: usize,
    /// Pre-pool side length.
    pub side: usize,
    pub factor: usize,
    /// `[n, channels, side/factor, side/factor]` flat indices into the
    /// pre-pool plane.
    pub indices: Vec<usize>,
}

impl StageTrace {
    fn per_patch(&self) -> usize {
        let o = self.side / self.factor;
        self.channels * o * o
    }
}

impl PoolTrace {
    /// Trace restricted to the given patches, in that order.
    pub fn select(&self, patches: &[usize]) -> PoolTrace {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let k = s.per_patch();
                let mut indices = Vec::with_capacity(patches.len() * k);
                for &p in patches {
                    indices.extend_from_slice(&s.indices[p * k..(p + 1) * k]);
                }
                StageTrace { indices, ..s.clone() }
            })
            .collect();
        PoolTrace { n: patches.len(), stages }
    }

    pub fn concat(parts: &[PoolTrace]) -> PoolTrace {
        let first = &parts[0];
        let stages = (0..first.stages.len())
            .map(|i| StageTrace {
                indices: parts.iter().flat_map(|p| p.stages[i].indices.iter().copied()).collect(),
                ..first.stages[i].clone()
            })
            .collect();
        PoolTrace { n: parts.iter().map(|p| p.n).sum(), stages }
    }
}

fn top_left_indices(n: usize, channels: usize, side: usize, factor: usize) -> Vec<usize> {
    let o = side / factor;
    let mut out = Vec::with_capacity(n * channels * o * o);
    for _ in 0..n * channels {
        for i in 0..o {
            for j in 0..o {
                out.push(i * factor * side + j * factor);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCodec {
    pub cfg: ImageCodecConfig,
    widths: Vec<usize>,
    enc: Vec<(ParamId, ParamId)>,
    proj: Linear,
    dec_proj: Linear,
    /// `dec[i]` maps `widths[i + 1]` back to `widths[i]` channels.
    dec: Vec<(ParamId, ParamId)>,
}

impl ImageCodec {
    pub fn new(init: &mut Init, prefix: &str, cfg: ImageCodecConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let conv = |init: &mut Init, name: String, cin: usize, cout: usize| {
            let std = 1.0 / ((cin * KERNEL * KERNEL) as f64).sqrt();
            (
                init.normal(&format!("{name}.w"), &[cout, cin, KERNEL, KERNEL], std),
                init.zeros(&format!("{name}.b"), &[cout]),
            )
        };
        let enc = (0..cfg.pools.len())
            .map(|i| conv(init, format!("{prefix}.enc{i}"), widths[i], widths[i + 1]))
            .collect();
        let proj = init.linear(&format!("{prefix}.proj"), cfg.d, cfg.d);
        let dec_proj = init.linear(&format!("{prefix}.dec_proj"), cfg.d, cfg.d);
        let dec = (0..cfg.pools.len())
            .map(|i| conv(init, format!("{prefix}.dec{i}"), widths[i + 1], widths[i]))
            .collect();
        Ok(ImageCodec { cfg, widths, enc, proj, dec_proj, dec })
    }

    pub fn encoder_convs(&self) -> &[(ParamId, ParamId)] {
        &self.enc
    }

    pub fn decoder_convs(&self) -> &[(ParamId, ParamId)] {
        &self.dec
    }

    pub fn projections(&self) -> (Linear, Linear) {
        (self.proj, self.dec_proj)
    }

    /// Identity kernels, zero biases and identity projections. Every stage
    /// must keep the channel count (`channels == d`).
    pub fn set_identity_weights(&self, store: &mut ParamStore) {
        for &(w, b) in self.enc.iter().chain(&self.dec) {
            let t = store.get_mut(w);
            let (cout, cin) = (t.shape()[0], t.shape()[1]);
            assert_eq!(cout, cin, "identity weights need equal stage widths");
            t.data_mut().fill(0.0);
            for c in 0..cout {
                t.data_mut()[((c * cin + c) * KERNEL + 1) * KERNEL + 1] = 1.0;
            }
            store.get_mut(b).data_mut().fill(0.0);
        }
        for l in [self.proj, self.dec_proj] {
            let t = store.get_mut(l.w);
            let d = t.rows();
            t.data_mut().fill(0.0);
            for i in 0..d {
                t.data_mut()[i * d + i] = 1.0;
            }
            store.get_mut(l.b).data_mut().fill(0.0);
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.cfg.channels * self.cfg.patch_px * self.cfg.patch_px
    }

    /// `x: [n, C * W * W]` (each row a `C x W x W` patch) to `[n, d]`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, PoolTrace)> {
        let shape = tape.shape(x).to_vec();
        let n = shape[0];
        if tape.value(x).len() != n * self.patch_dim() {
            return Err(Error::Shape(format!(
                "image codec expects {} values per patch, got shape {:?}",
                self.patch_dim(),
                shape
            )));
        }
        let w = self.cfg.patch_px;
        let mut h = tape.reshape(x, &[n, self.cfg.channels, w, w]);
        let mut side = w;
        let mut stages = Vec::with_capacity(self.enc.len());
        for (i, &(cw, cb)) in self.enc.iter().enumerate() {
            let (wv, bv) = (tape.param(cw), tape.param(cb));
            h = tape.conv2d(h, wv, bv);
            h = self.cfg.activation.apply(tape, h);
            let k = self.cfg.pools[i];
            let (pooled, indices) = tape.max_pool(h, k);
            stages.push(StageTrace { channels: self.widths[i + 1], side, factor: k, indices });
            h = pooled;
            side /= k;
        }
        let flat = tape.reshape(h, &[n, self.cfg.d]);
        Ok((self.proj.forward(tape, flat), PoolTrace { n, stages }))
    }

    /// `e: [n, d]` to `[n, C * W * W]`. Unpooling follows `trace` when the
    /// bypass is enabled and a trace is given, the top-left cell otherwise.
    pub fn decode(&self, tape: &mut Tape, e: Var, trace: Option<&PoolTrace>) -> Result<Var> {
        let n = tape.shape(e)[0];
        if tape.value(e).len() != n * self.cfg.d {
            return Err(Error::Shape(format!("image decoder expects [n, {}], got {:?}", self.cfg.d, tape.shape(e))));
        }
        let trace = trace.filter(|_| self.cfg.bypass);
        if let Some(t) = trace {
            let ok = t.n == n
                && t.stages.len() == self.enc.len()
                && t.stages.iter().zip(&self.cfg.pools).all(|(s, &k)| s.factor == k);
            if !ok {
                return Err(Error::Shape(format!(
                    "pool trace for {} patches / {} stages does not match decoder ({} patches / {} stages)",
                    t.n,
                    t.stages.len(),
                    n,
                    self.enc.len()
                )));
            }
        }
        let h = self.dec_proj.forward(tape, e);
        let mut h = tape.reshape(h, &[n, self.cfg.d, 1, 1]);
        let mut side = 1;
        for i in (0..self.dec.len()).rev() {
            let k = self.cfg.pools[i];
            let out = side * k;
            h = match trace {
                Some(t) => tape.unpool(h, &t.stages[i].indices, out, out),
                None => tape.unpool(h, &top_left_indices(n, self.widths[i + 1], out, k), out, out),
            };
            side = out;
            let (cw, cb) = self.dec[i];
            let (wv, bv) = (tape.param(cw), tape.param(cb));
            h = tape.conv2d(h, wv, bv);
            if i > 0 {
                h = self.cfg.activation.apply(tape, h);
            }
        }
        Ok(tape.reshape(h, &[n, self.patch_dim()]))
    }
}
