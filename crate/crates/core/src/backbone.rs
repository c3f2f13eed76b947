//! Per-organ staged encoder: convolutional local blocks in the early stages,
//! self-attention global blocks in the late stages. Also home of the
//! scaled dot-product attention shared with ORI and HFE.

use autodiff::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, MoonError, Result};
use crate::nn::{Conv3d, DepthwiseConv3d, Init, LayerNorm, Linear, ParamId, ParamStore, ParamVars};

/// `softmax(Q K^T / sqrt(d_k)) V` for `Q [N, d]`, `K [M, d]`, `V [M, d_v]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    contract!(
        qs.len() == 2 && ks.len() == 2 && vs.len() == 2,
        "attention expects matrices, got {:?} {:?} {:?}",
        qs,
        ks,
        vs
    );
    contract!(qs[1] > 0, "attention key dim must be positive");
    contract!(qs[1] == ks[1], "query dim {} != key dim {}", qs[1], ks[1]);
    contract!(ks[0] == vs[0], "{} keys but {} values", ks[0], vs[0]);
    let scores = g.matmul_t(q, false, k, true);
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = g.softmax_rows(scores);
    Ok(g.matmul(weights, v))
}

/// Attention with the feature dims split evenly into `heads` groups; head
/// outputs are concatenated in order.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return attention(g, q, k, v);
    }
    let d = *g.shape(q).last().unwrap_or(&0);
    let dv = *g.shape(v).last().unwrap_or(&0);
    contract!(
        heads > 0 && d.is_multiple_of(heads) && dv.is_multiple_of(heads),
        "dims {d}/{dv} not divisible into {heads} heads"
    );
    let (hd, hv) = (d / heads, dv / heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_last(q, h * hd, hd);
        let kh = g.slice_last(k, h * hd, hd);
        let vh = g.slice_last(v, h * hv, hv);
        outs.push(attention(g, qh, kh, vh)?);
    }
    Ok(g.concat_last(&outs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<[usize; 3]>,
    pub heads: usize,
    pub block_types: Vec<BlockKind>,
    pub mlp_ratio: usize,
    /// Kernel of the first (stem) convolution; never smaller than its
    /// stride. A point-wise stem on one input channel followed by layer
    /// norm would keep only the sign of each voxel.
    pub stem_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            blocks: vec![1, 1, 1, 1],
            strides: vec![[2; 3], [2; 3], [2; 3], [1; 3]],
            heads: 4,
            block_types: vec![BlockKind::Local, BlockKind::Local, BlockKind::Global, BlockKind::Global],
            mlp_ratio: 2,
            stem_kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n < 3 {
            return Err(MoonError::Config(format!("encoder needs at least 3 stages, got {n}")));
        }
        if self.blocks.len() != n || self.strides.len() != n || self.block_types.len() != n {
            return Err(MoonError::Config(
                "encoder channels/blocks/strides/block_types must have equal lengths".into(),
            ));
        }
        if self.channels.contains(&0) || self.heads == 0 || self.mlp_ratio == 0 || self.stem_kernel == 0 {
            return Err(MoonError::Config("encoder widths, heads, mlp_ratio and stem_kernel must be positive".into()));
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return Err(MoonError::Config("encoder strides must be >= 1".into()));
        }
        for (i, kind) in self.block_types.iter().enumerate() {
            if *kind == BlockKind::Global && !self.channels[i].is_multiple_of(self.heads) {
                return Err(MoonError::Config(format!(
                    "stage {} width {} not divisible by {} heads",
                    i + 1,
                    self.channels[i],
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Product of all stage strides per axis.
    pub fn total_stride(&self) -> [usize; 3] {
        let mut t = [1; 3];
        for s in &self.strides {
            for a in 0..3 {
                t[a] *= s[a];
            }
        }
        t
    }

    /// Output dims of every stage for an input of `dims`.
    pub fn stage_dims(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let mut cur = dims;
        self.strides
            .iter()
            .map(|s| {
                cur = [0, 1, 2].map(|a| cur[a].div_ceil(s[a]));
                cur
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct LocalBlock {
    pos: DepthwiseConv3d,
    norm1: LayerNorm,
    pw1: Linear,
    dw: DepthwiseConv3d,
    pw2: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct GlobalBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

#[derive(Clone, Debug)]
enum Block {
    Local(LocalBlock),
    Global(GlobalBlock),
}

fn mlp<R: Rng>(store: &mut ParamStore, name: &str, c: usize, ratio: usize, rng: &mut R) -> (LayerNorm, Linear, Linear) {
    let norm = LayerNorm::new(store, &format!("{name}.norm2"), c);
    let fc1 = Linear::new(store, &format!("{name}.fc1"), c, c * ratio, true, Init::ScaledNormal { fan_in: c, gain: 1.0 }, rng);
    let fc2 = Linear::new(
        store,
        &format!("{name}.fc2"),
        c * ratio,
        c,
        true,
        Init::ScaledNormal { fan_in: c * ratio, gain: 1.0 },
        rng,
    );
    (norm, fc1, fc2)
}

impl Block {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, kind: BlockKind, c: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore, n: &str, i: usize, o: usize, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, o, true, Init::ScaledNormal { fan_in: i, gain: 1.0 }, rng)
        };
        match kind {
            BlockKind::Local => {
                let pos = DepthwiseConv3d::new(store, &format!("{name}.pos"), c, 3, rng);
                let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
                let pw1 = lin(store, "pw1", c, c, rng);
                let dw = DepthwiseConv3d::new(store, &format!("{name}.dw"), c, 3, rng);
                let pw2 = lin(store, "pw2", c, c, rng);
                let (norm2, fc1, fc2) = mlp(store, name, c, cfg.mlp_ratio, rng);
                Block::Local(LocalBlock {
                    pos,
                    norm1,
                    pw1,
                    dw,
                    pw2,
                    norm2,
                    fc1,
                    fc2,
                })
            }
            BlockKind::Global => {
                let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
                let qkv = lin(store, "qkv", c, 3 * c, rng);
                let proj = lin(store, "proj", c, c, rng);
                let (norm2, fc1, fc2) = mlp(store, name, c, cfg.mlp_ratio, rng);
                Block::Global(GlobalBlock {
                    norm1,
                    qkv,
                    proj,
                    norm2,
                    fc1,
                    fc2,
                    heads: cfg.heads,
                })
            }
        }
    }

    fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let (norm2, fc1, fc2, x) = match self {
            Block::Local(b) => {
                let p = b.pos.forward(g, pv, x);
                let x = g.add(x, p);
                let h = b.norm1.forward(g, pv, x);
                let h = b.pw1.forward(g, pv, h);
                let h = b.dw.forward(g, pv, h);
                let h = b.pw2.forward(g, pv, h);
                (&b.norm2, &b.fc1, &b.fc2, g.add(x, h))
            }
            Block::Global(b) => {
                let shape = g.shape(x).to_vec();
                let c = shape[3];
                let n = shape[..3].iter().product();
                let tokens = g.reshape(x, &[n, c]);
                let h = b.norm1.forward(g, pv, tokens);
                let qkv = b.qkv.forward(g, pv, h);
                let q = g.slice_last(qkv, 0, c);
                let k = g.slice_last(qkv, c, c);
                let v = g.slice_last(qkv, 2 * c, c);
                let a = multi_head_attention(g, q, k, v, b.heads)?;
                let a = b.proj.forward(g, pv, a);
                let a = g.reshape(a, &shape);
                (&b.norm2, &b.fc1, &b.fc2, g.add(x, a))
            }
        };
        let h = norm2.forward(g, pv, x);
        let h = fc1.forward(g, pv, h);
        let h = g.gelu(h);
        let h = fc2.forward(g, pv, h);
        Ok(g.add(x, h))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Conv3d,
    /// Absent on the stem: normalizing a one-channel conv output over
    /// channels maps uniform regions of any brightness to the same vector.
    embed_norm: Option<LayerNorm>,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
}

/// Feature maps of the last three stages plus the pooled embedding of the
/// deepest one.
#[derive(Clone, Copy, Debug)]
pub struct StagePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub pooled: Var,
}

/// Tensor-valued pyramid returned by [`Encoder::encode_volume`].
#[derive(Clone, Debug)]
pub struct PyramidValues {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub pooled: Tensor,
}

/// One organ branch.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    input_dims: [usize; 3],
    stage_dims: Vec<[usize; 3]>,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        input_dims: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.total_stride();
        if (0..3).any(|a| input_dims[a] < total[a]) {
            return Err(MoonError::InputTooSmall {
                dims: input_dims,
                stride: total,
            });
        }
        let stage_dims = cfg.stage_dims(input_dims);
        let mut stages = Vec::with_capacity(cfg.num_stages());
        let mut in_ch = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let sname = format!("{name}.stage{}", i + 1);
            let stride = cfg.strides[i];
            let kernel = if i == 0 {
                stride.map(|st| cfg.stem_kernel.max(st))
            } else {
                stride
            };
            let embed = Conv3d::new(store, &format!("{sname}.embed"), in_ch, c, kernel, stride, rng);
            let embed_norm = (i > 0).then(|| LayerNorm::new(store, &format!("{sname}.embed_norm"), c));
            let pos = (cfg.block_types[i] == BlockKind::Global).then(|| {
                let [h, w, d] = stage_dims[i];
                store.add(format!("{sname}.pos_embed"), Tensor::zeros(&[h, w, d, c]))
            });
            let blocks = (0..cfg.blocks[i])
                .map(|b| Block::new(store, &format!("{sname}.block{b}"), cfg.block_types[i], c, cfg, rng))
                .collect();
            stages.push(Stage {
                embed,
                embed_norm,
                pos,
                blocks,
            });
            in_ch = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            input_dims,
            stage_dims,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Spatial dims of every stage output.
    pub fn stage_dims(&self) -> &[[usize; 3]] {
        &self.stage_dims
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.cfg.channels[stage]
    }

    /// Runs stage `stage` (zero-based) on its input map.
    pub fn stage_forward(&self, g: &mut Graph, pv: &ParamVars, stage: usize, x: Var) -> Result<Var> {
        let st = &self.stages[stage];
        let mut x = st.embed.forward(g, pv, x);
        if let Some(norm) = &st.embed_norm {
            x = norm.forward(g, pv, x);
        }
        if let Some(pos) = st.pos {
            x = g.add(x, pv[pos]);
        }
        for b in &st.blocks {
            x = b.forward(g, pv, x)?;
        }
        Ok(x)
    }

    /// Checks an input map against the dims this branch was built for.
    pub fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        contract!(
            shape.len() == 4 && shape[..3] == self.input_dims[..] && shape[3] == 1,
            "encoder built for [{:?}, 1] got {:?}",
            self.input_dims,
            shape
        );
        Ok(())
    }

    /// All stages without cross-organ interaction.
    pub fn encode(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<StagePyramid> {
        self.check_input(g, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for s in 0..self.stages.len() {
            cur = self.stage_forward(g, pv, s, cur)?;
            outs.push(cur);
        }
        let n = outs.len();
        let pooled = g.mean_rows(outs[n - 1]);
        Ok(StagePyramid {
            f1: outs[n - 3],
            f2: outs[n - 2],
            f3: outs[n - 1],
            pooled,
        })
    }

    /// Inference-mode encoding of a single-channel `[H, W, D, 1]` input.
    pub fn encode_volume(&self, store: &ParamStore, input: &Tensor) -> Result<PyramidValues> {
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let x = g.constant(input.clone());
        let p = self.encode(&mut g, &pv, x)?;
        Ok(PyramidValues {
            f1: g.value(p.f1).clone(),
            f2: g.value(p.f2).clone(),
            f3: g.value(p.f3).clone(),
            pooled: g.value(p.pooled).clone(),
        })
    }
}
