use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Binder, Indicator, ModelConfig, ParamTree, Partition, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Paths that stay on their site: the encoder self-attention query
/// projection and the channel-selection head that fuses the indicator.
pub const PRIVATE_PATHS: [&str; 4] = [
    "encoder.attn.q.weight",
    "encoder.attn.q.bias",
    "cs.fc.weight",
    "cs.fc.bias",
];

/// Output of the temporal cross-attention block.
#[derive(Debug, Clone)]
pub struct RscOutput {
    /// `[h*w, c]`, residual already added.
    pub features: Var,
    /// Per-window attention weights `[s*s, n_context]`.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[h0*w0, classes]` for the current frame.
    pub logits: Var,
    /// Encoder feature of the current frame, `[h*w, c]`.
    pub encoded: Var,
    /// Feature after temporal attention and channel selection, `[h*w, c]`.
    pub feature: Var,
}

/// Layer logic plus the precomputed token layouts for one configuration.
#[derive(Debug, Clone)]
pub struct StModel {
    cfg: ModelConfig,
    /// Element indices of each current-frame window in a `[h*w, c]` map.
    window_rows: Vec<Arc<[usize]>>,
    /// Element indices of each window's context tokens in the concatenated
    /// partition tokens (current frame first, then older frames).
    context: Vec<Arc<[usize]>>,
    context_len: Vec<usize>,
}

impl StModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w, c, s) = (cfg.feat_h(), cfg.feat_w(), cfg.channels, cfg.window);
        let (nwy, nwx) = cfg.windows();

        // token offsets of each frame's partition inside the concatenation
        let order: Vec<usize> = (0..cfg.frames).rev().collect();
        let mut offsets = vec![0; cfg.frames];
        let mut acc = 0;
        for &j in &order {
            offsets[j] = acc;
            let p = cfg.pools[j];
            acc += (h / p) * (w / p);
        }

        let mut window_rows = Vec::new();
        let mut context = Vec::new();
        let mut context_len = Vec::new();
        for wy in 0..nwy {
            for wx in 0..nwx {
                let mut rows = Vec::with_capacity(s * s * c);
                for iy in 0..s {
                    for ix in 0..s {
                        let tok = (wy * s + iy) * w + wx * s + ix;
                        rows.extend((0..c).map(|ch| tok * c + ch));
                    }
                }
                window_rows.push(Arc::from(rows));

                let mut tokens = Vec::new();
                for &j in &order {
                    let p = cfg.pools[j];
                    let gw = w / p;
                    let (r0, r1) = (wy * s / p, ((wy + 1) * s - 1) / p);
                    let (c0, c1) = (wx * s / p, ((wx + 1) * s - 1) / p);
                    for py in r0..=r1 {
                        for px in c0..=c1 {
                            tokens.push(offsets[j] + py * gw + px);
                        }
                    }
                }
                context_len.push(tokens.len());
                let elems: Vec<usize> = tokens
                    .iter()
                    .flat_map(|&t| (0..c).map(move |ch| t * c + ch))
                    .collect();
                context.push(Arc::from(elems));
            }
        }
        Ok(Self {
            cfg,
            window_rows,
            context,
            context_len,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Number of context tokens attended by each current-frame window.
    pub fn context_lengths(&self) -> &[usize] {
        &self.context_len
    }

    pub fn init_params(&self, seed: u64) -> ParamTree {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, q) = (cfg.channels, cfg.patch);
        let mut tree = ParamTree::new();
        let linear = |tree: &mut ParamTree, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng| {
            let std = gain / (fan_in as f64).sqrt();
            tree.insert(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng), Partition::Shared);
            tree.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]), Partition::Shared);
        };

        linear(&mut tree, "encoder.embed", q * q * cfg.in_channels, c, 1.0, &mut rng);
        for name in ["q", "k", "v"] {
            linear(&mut tree, &format!("encoder.attn.{name}"), c, c, 1.0, &mut rng);
        }
        linear(&mut tree, "encoder.attn.out", c, c, 0.5, &mut rng);
        linear(&mut tree, "encoder.mlp.fc1", c, cfg.mlp_hidden, 2f64.sqrt(), &mut rng);
        linear(&mut tree, "encoder.mlp.fc2", cfg.mlp_hidden, c, 0.5, &mut rng);

        // partition FCs start as average pooling plus a little noise
        for (j, &p) in cfg.pools.iter().enumerate() {
            let fan_in = p * p * c;
            let mut wt = Tensor::randn(&[fan_in, c], 0.1 / (fan_in as f64).sqrt(), &mut rng);
            for cell in 0..p * p {
                for ch in 0..c {
                    wt.data_mut()[(cell * c + ch) * c + ch] += 1.0 / (p * p) as f64;
                }
            }
            tree.insert(format!("rsc.part{j}.weight"), wt, Partition::Shared);
            tree.insert(format!("rsc.part{j}.bias"), Tensor::zeros(&[c]), Partition::Shared);
        }
        linear(&mut tree, "rsc.q", c, c, 1.0, &mut rng);
        linear(&mut tree, "rsc.k", c, c, 1.0, &mut rng);
        // zero value projection: the temporal block starts as the identity
        tree.insert("rsc.v.weight", Tensor::zeros(&[c, c]), Partition::Shared);
        tree.insert("rsc.v.bias", Tensor::zeros(&[c]), Partition::Shared);
        let s2 = cfg.window * cfg.window;
        for (i, &n) in self.context_len.iter().enumerate() {
            tree.insert(format!("rsc.bias.w{i}"), Tensor::zeros(&[s2, n]), Partition::Shared);
        }

        linear(&mut tree, "cs.fc", c + cfg.indicator_dim, c, 0.5, &mut rng);
        linear(&mut tree, "decoder.fc1", c, cfg.decoder_hidden, 2f64.sqrt(), &mut rng);
        linear(&mut tree, "decoder.fc2", cfg.decoder_hidden, cfg.classes * q * q, 1.0, &mut rng);

        for path in PRIVATE_PATHS {
            tree.set_partition(path, Partition::Private).expect("private path exists");
        }
        tree
    }

    /// `x W + b` over the last dim.
    pub fn linear(&self, g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
        let w = b.var(g, &format!("{prefix}.weight"))?;
        let bias = b.var(g, &format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, bias)
    }

    /// Encodes `[n, h0, w0, ch]` frames independently; returns `[n*h*w, c]`
    /// with frame-major token order.
    pub fn encode_flat(&self, g: &mut Graph, b: &mut Binder, frames: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let s = g.shape(frames).to_vec();
        if s.len() != 4 || s[1] != cfg.frame_h || s[2] != cfg.frame_w || s[3] != cfg.in_channels {
            return Err(Error::dim(format!(
                "frames {s:?} do not match [n, {}, {}, {}]",
                cfg.frame_h, cfg.frame_w, cfg.in_channels
            )));
        }
        let n = s[0];
        let (h, w, c, q, ch) = (cfg.feat_h(), cfg.feat_w(), cfg.channels, cfg.patch, cfg.in_channels);

        let mut idx = Vec::with_capacity(n * h * w * q * q * ch);
        for f in 0..n {
            for ty in 0..h {
                for tx in 0..w {
                    for dy in 0..q {
                        for dx in 0..q {
                            let base = ((f * cfg.frame_h + ty * q + dy) * cfg.frame_w + tx * q + dx) * ch;
                            idx.extend(base..base + ch);
                        }
                    }
                }
            }
        }
        let patches = g.gather(frames, idx.into(), &[n * h * w, q * q * ch])?;
        let x0 = self.linear(g, b, patches, "encoder.embed")?;

        // windowed self-attention; the query projection is the private part
        let split: Arc<[usize]> = window_index(n, h, w, c, cfg.window).into();
        let nw = n * (h / cfg.window) * (w / cfg.window);
        let s2 = cfg.window * cfg.window;
        let qv = self.linear(g, b, x0, "encoder.attn.q")?;
        let kv = self.linear(g, b, x0, "encoder.attn.k")?;
        let vv = self.linear(g, b, x0, "encoder.attn.v")?;
        let qw = g.gather(qv, split.clone(), &[nw, s2, c])?;
        let kw = g.gather(kv, split.clone(), &[nw, s2, c])?;
        let vw = g.gather(vv, split.clone(), &[nw, s2, c])?;
        let kt = g.transpose(kw)?;
        let scores = g.matmul(qw, kt)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
        let att = g.softmax_lastdim(scores)?;
        let mixed = g.matmul(att, vw)?;
        let merged = g.gather(mixed, invert(&split).into(), &[n * h * w, c])?;
        let proj = self.linear(g, b, merged, "encoder.attn.out")?;
        let x1 = g.add(x0, proj)?;

        let hid = self.linear(g, b, x1, "encoder.mlp.fc1")?;
        let hid = g.relu(hid)?;
        let out = self.linear(g, b, hid, "encoder.mlp.fc2")?;
        g.add(x1, out)
    }

    /// Per-frame features `[n, h, w, c]`.
    pub fn encode(&self, g: &mut Graph, b: &mut Binder, frames: Var) -> Result<Var> {
        let n = g.shape(frames).first().copied().unwrap_or(0);
        let flat = self.encode_flat(g, b, frames)?;
        g.reshape(flat, &[n, self.cfg.feat_h(), self.cfg.feat_w(), self.cfg.channels])
    }

    /// Rows of frame `f` out of a frame-major `[n*h*w, c]` feature stack.
    fn frame_slice(&self, g: &mut Graph, stack: Var, f: usize) -> Result<Var> {
        let len = self.cfg.tokens() * self.cfg.channels;
        let idx: Arc<[usize]> = (f * len..(f + 1) * len).collect();
        g.gather(stack, idx, &[self.cfg.tokens(), self.cfg.channels])
    }

    /// Flattens each `p x p` patch of a `[h, w, c]` (or `[h*w, c]`) map to
    /// `p*p*c` values and projects back to `c`, giving `[h/p * w/p, c]`.
    pub fn partition_past(&self, g: &mut Graph, b: &mut Binder, feat: Var, p: usize, prefix: &str) -> Result<Var> {
        let (h, w, c) = (self.cfg.feat_h(), self.cfg.feat_w(), self.cfg.channels);
        if g.value(feat).numel() != h * w * c {
            return Err(Error::dim(format!("partition expects {h}x{w}x{c} features, got {:?}", g.shape(feat))));
        }
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::dim(format!("pool size {p} does not divide {h}x{w}")));
        }
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(h * w * c);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let tok = (py * p + dy) * w + px * p + dx;
                        idx.extend(tok * c..tok * c + c);
                    }
                }
            }
        }
        let patches = g.gather(feat, idx.into(), &[gh * gw, p * p * c])?;
        self.linear(g, b, patches, prefix)
    }

    /// Window cross-attention of the current frame over its own partition
    /// tokens and the co-located pooled tokens of past frames, plus residual.
    ///
    /// `parts[j]` is frame `j`'s partition (oldest first, current last).
    pub fn rsc_temporal(&self, g: &mut Graph, b: &mut Binder, current: Var, parts: &[Var]) -> Result<RscOutput> {
        let cfg = &self.cfg;
        let (h, w, c) = (cfg.feat_h(), cfg.feat_w(), cfg.channels);
        if parts.len() != cfg.frames {
            return Err(Error::dim(format!("{} partitions for {} frames", parts.len(), cfg.frames)));
        }
        let cur = g.reshape(current, &[h * w, c])?;
        let mut ordered = Vec::with_capacity(parts.len());
        for (j, &part) in parts.iter().enumerate().rev() {
            let p = cfg.pools[j];
            let want = (h / p) * (w / p);
            let got = g.value(part).numel() / c;
            if got != want || g.value(part).numel() % c != 0 {
                return Err(Error::dim(format!("frame {j}: {got} tokens, expected {want}")));
            }
            ordered.push(g.reshape(part, &[want, c])?);
        }
        let tokens = g.concat(&ordered, 0)?;

        let q = self.linear(g, b, cur, "rsc.q")?;
        let k = self.linear(g, b, tokens, "rsc.k")?;
        let v = self.linear(g, b, tokens, "rsc.v")?;
        let s2 = cfg.window * cfg.window;
        let inv_sqrt_c = 1.0 / (c as f64).sqrt();

        let mut outs = Vec::with_capacity(self.window_rows.len());
        let mut attention = Vec::with_capacity(self.window_rows.len());
        for (i, rows) in self.window_rows.iter().enumerate() {
            let n = self.context_len[i];
            let qw = g.gather(q, rows.clone(), &[s2, c])?;
            let kw = g.gather(k, self.context[i].clone(), &[n, c])?;
            let vw = g.gather(v, self.context[i].clone(), &[n, c])?;
            let kt = g.transpose(kw)?;
            let scores = g.matmul(qw, kt)?;
            let scores = g.scale(scores, inv_sqrt_c)?;
            let bias = b.var(g, &format!("rsc.bias.w{i}"))?;
            let scores = g.add(scores, bias)?;
            let att = g.softmax_lastdim(scores)?;
            outs.push(g.matmul(att, vw)?);
            attention.push(att);
        }
        let stacked = g.concat(&outs, 0)?;
        let split = window_index(1, h, w, c, cfg.window);
        let merged = g.gather(stacked, invert(&split).into(), &[h * w, c])?;
        let features = g.add(cur, merged)?;
        Ok(RscOutput { features, attention })
    }

    /// `F' = F + F * sigmoid(FC([mean(F), xi]))`, the gate broadcast over
    /// spatial positions. Returns `(F', gate)`.
    pub fn channel_select(&self, g: &mut Graph, b: &mut Binder, feat: Var, indicator: &Indicator) -> Result<(Var, Var)> {
        let c = self.cfg.channels;
        if indicator.dim() != self.cfg.indicator_dim {
            return Err(Error::dim(format!(
                "indicator of dim {} for configured {}",
                indicator.dim(),
                self.cfg.indicator_dim
            )));
        }
        let shape = g.shape(feat).to_vec();
        let rows = g.value(feat).numel() / c;
        let flat = g.reshape(feat, &[rows, c])?;
        let pooled = g.mean_rows(flat)?;
        let xi = g.constant(indicator.vector());
        let z = g.concat(&[pooled, xi], 0)?;
        let z = g.reshape(z, &[1, c + indicator.dim()])?;
        let gate = self.linear(g, b, z, "cs.fc")?;
        let gate = g.sigmoid(gate)?;
        let gate = g.reshape(gate, &[c])?;
        let selected = g.mul_row(flat, gate)?;
        let out = g.add(flat, selected)?;
        Ok((g.reshape(out, &shape)?, gate))
    }

    /// Per-token MLP emitting `patch x patch` sub-pixel logits, rearranged to
    /// `[h0*w0, classes]`.
    pub fn decode(&self, g: &mut Graph, b: &mut Binder, feat: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let (h, w, c, q, k) = (cfg.feat_h(), cfg.feat_w(), cfg.channels, cfg.patch, cfg.classes);
        let flat = g.reshape(feat, &[h * w, c])?;
        let hid = self.linear(g, b, flat, "decoder.fc1")?;
        let hid = g.relu(hid)?;
        let sub = self.linear(g, b, hid, "decoder.fc2")?;
        let mut idx = Vec::with_capacity(cfg.pixels() * k);
        for y in 0..cfg.frame_h {
            for x in 0..cfg.frame_w {
                let tok = (y / q) * w + x / q;
                let cell = (y % q) * q + x % q;
                let base = tok * q * q * k + cell * k;
                idx.extend(base..base + k);
            }
        }
        g.gather(sub, idx.into(), &[cfg.pixels(), k])
    }

    /// Full clip path: encode, temporal attention, channel selection, decode.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, clip: &VideoClip, indicator: &Indicator) -> Result<ForwardOutput> {
        self.forward_route(g, b, clip, indicator, self.cfg.flags.temporal)
    }

    /// Single-frame path without the temporal block (the synthetic
    /// pre-training route).
    pub fn forward_spatial(&self, g: &mut Graph, b: &mut Binder, clip: &VideoClip, indicator: &Indicator) -> Result<ForwardOutput> {
        self.forward_route(g, b, clip, indicator, false)
    }

    fn forward_route(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        clip: &VideoClip,
        indicator: &Indicator,
        temporal: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let n = clip.frame_count();
        if n == 0 || n > cfg.frames {
            return Err(Error::dim(format!("clip has {n} frames, model takes up to {}", cfg.frames)));
        }
        let frames = if temporal {
            g.constant(&clip.frames)
        } else {
            g.constant(&clip.current_only().frames)
        };
        let stack = self.encode_flat(g, b, frames)?;
        let encoded_n = if temporal { n } else { 1 };
        let current = self.frame_slice(g, stack, encoded_n - 1)?;

        let star = if temporal {
            // missing history slots reuse the current frame
            let missing = cfg.frames - n;
            let mut parts = Vec::with_capacity(cfg.frames);
            for (slot, &p) in cfg.pools.iter().enumerate() {
                let feat = if slot < missing {
                    current
                } else {
                    self.frame_slice(g, stack, slot - missing)?
                };
                parts.push(self.partition_past(g, b, feat, p, &format!("rsc.part{slot}"))?);
            }
            self.rsc_temporal(g, b, current, &parts)?.features
        } else {
            current
        };

        let feature = if cfg.flags.channel_select {
            let zeros;
            let ind = if cfg.flags.prompt {
                indicator
            } else {
                zeros = Indicator::zeros(cfg.indicator_dim);
                &zeros
            };
            self.channel_select(g, b, star, ind)?.0
        } else {
            star
        };
        let logits = self.decode(g, b, feature)?;
        Ok(ForwardOutput {
            logits,
            encoded: current,
            feature,
        })
    }
}

/// Element gather index that reorders `[n, h, w, c]` into
/// `[n, h/s, w/s, s, s, c]`.
fn window_index(n: usize, h: usize, w: usize, c: usize, s: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * h * w * c);
    for f in 0..n {
        for wy in 0..h / s {
            for wx in 0..w / s {
                for iy in 0..s {
                    for ix in 0..s {
                        let base = ((f * h + wy * s + iy) * w + wx * s + ix) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `[h, w, c] -> [h/s, w/s, s, s, c]`
pub fn window_split(g: &mut Graph, feat: Var, s: usize) -> Result<Var> {
    let shape = g.shape(feat).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("window_split expects [h, w, c], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::dim(format!("window {s} does not divide {h}x{w}")));
    }
    let idx = window_index(1, h, w, c, s);
    g.gather(feat, idx.into(), &[h / s, w / s, s, s, c])
}

/// Inverse of [`window_split`].
pub fn window_merge(g: &mut Graph, windows: Var) -> Result<Var> {
    let shape = g.shape(windows).to_vec();
    if shape.len() != 5 || shape[2] != shape[3] {
        return Err(Error::dim(format!("window_merge expects [gh, gw, s, s, c], got {shape:?}")));
    }
    let (s, c) = (shape[2], shape[4]);
    let (h, w) = (shape[0] * s, shape[1] * s);
    let idx = invert(&window_index(1, h, w, c, s));
    g.gather(windows, idx.into(), &[h, w, c])
}
