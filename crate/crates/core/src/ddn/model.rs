//! Model parameters and the three-branch forward pass.
//!
//! Topology: a conv stem lifts the gradient stack to `channels` features.
//! Each enabled attention branch runs its own stem over
//! concat(gradients, extra planes), a ResBlock stack, and a sigmoid; the
//! main stem's features are multiplied by the resulting attention maps
//! once, before the main ResBlock stack. A conv + 2x2 max-pool + ReLU +
//! global average pool feeds two parallel dense heads: signed blur and
//! log |σ̂| (clamped).
//!
//! ResBlocks are conv-ReLU-conv plus the skip connection; no normalization
//! layers anywhere.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Scalar, Tape, TensorData, ValueId};
use crate::config::SigmaParam;

use super::{DdnConfig, DdnError};

/// FNV-1a hash used to derive per-tensor init streams from tensor names, so
/// shared tensors initialize identically across ablation variants.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub w: TensorData<T>,
    pub b: TensorData<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    pub w: TensorData<T>,
    pub b: TensorData<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T> {
    pub stem: ConvParams<T>,
    pub blocks: Vec<ResBlockParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdnModel<T> {
    pub cfg: DdnConfig,
    pub main_stem: ConvParams<T>,
    pub pos_branch: Option<BranchParams<T>>,
    pub color_branch: Option<BranchParams<T>>,
    pub main_blocks: Vec<ResBlockParams<T>>,
    pub post: ConvParams<T>,
    pub head_blur: DenseParams<T>,
    pub head_sigma: DenseParams<T>,
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> TensorData<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit))
        .collect();
    TensorData::from_values(shape, values)
}

fn init_conv<T: Scalar>(name: &str, seed: u64, co: usize, ci: usize, k: usize) -> ConvParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name));
    ConvParams {
        w: he_uniform(&mut rng, &[co, ci, k, k], ci * k * k),
        b: TensorData::zeros(&[co]),
    }
}

fn init_dense<T: Scalar>(
    name: &str,
    seed: u64,
    out: usize,
    inp: usize,
    bias: f64,
) -> DenseParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name));
    DenseParams {
        w: he_uniform(&mut rng, &[out, inp], inp),
        b: TensorData::from_values(&[out], vec![T::from_f64(bias); out]),
    }
}

fn init_branch<T: Scalar>(prefix: &str, seed: u64, cfg: &DdnConfig) -> BranchParams<T> {
    let c = cfg.channels;
    BranchParams {
        stem: init_conv(&format!("{prefix}.stem"), seed, c, cfg.in_channels() + 2, 3),
        blocks: (0..cfg.resblocks)
            .map(|i| ResBlockParams {
                conv1: init_conv(&format!("{prefix}.block{i}.conv1"), seed, c, c, 3),
                conv2: init_conv(&format!("{prefix}.block{i}.conv2"), seed, c, c, 3),
            })
            .collect(),
    }
}

impl<T: Scalar> DdnModel<T> {
    /// He-uniform weights, zero biases. Per-tensor streams are derived from
    /// the tensor name, so a tensor shared between ablation variants gets
    /// identical initial values for the same seed.
    pub fn init(cfg: &DdnConfig, seed: u64) -> Result<Self, DdnError> {
        cfg.validate()?;
        let c = cfg.channels;
        let sigma_bias = match cfg.sigma_param {
            SigmaParam::Log => 0.0,
            SigmaParam::Raw => 1.0,
        };
        Ok(Self {
            cfg: cfg.clone(),
            main_stem: init_conv("main.stem", seed, c, cfg.in_channels(), 3),
            pos_branch: cfg
                .positional
                .then(|| init_branch("pos", seed, cfg)),
            color_branch: cfg
                .color
                .then(|| init_branch("color", seed, cfg)),
            main_blocks: (0..cfg.resblocks)
                .map(|i| ResBlockParams {
                    conv1: init_conv(&format!("main.block{i}.conv1"), seed, c, c, 3),
                    conv2: init_conv(&format!("main.block{i}.conv2"), seed, c, c, 3),
                })
                .collect(),
            post: init_conv("main.post", seed, c, c, 3),
            head_blur: init_dense("head.blur", seed, 1, c, 0.0),
            head_sigma: init_dense("head.sigma", seed, 1, c, sigma_bias),
        })
    }

    /// Parameter tensors in a fixed traversal order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &TensorData<T>)> {
        fn conv<'a, T>(name: &str, c: &'a ConvParams<T>) -> [(String, &'a TensorData<T>); 2] {
            [(format!("{name}.w"), &c.w), (format!("{name}.b"), &c.b)]
        }
        let mut out: Vec<(String, &TensorData<T>)> = Vec::new();
        out.extend(conv("main.stem", &self.main_stem));
        if let Some(b) = &self.pos_branch {
            out.extend(conv("pos.stem", &b.stem));
            for (i, blk) in b.blocks.iter().enumerate() {
                out.extend(conv(&format!("pos.block{i}.conv1"), &blk.conv1));
                out.extend(conv(&format!("pos.block{i}.conv2"), &blk.conv2));
            }
        }
        if let Some(b) = &self.color_branch {
            out.extend(conv("color.stem", &b.stem));
            for (i, blk) in b.blocks.iter().enumerate() {
                out.extend(conv(&format!("color.block{i}.conv1"), &blk.conv1));
                out.extend(conv(&format!("color.block{i}.conv2"), &blk.conv2));
            }
        }
        for (i, blk) in self.main_blocks.iter().enumerate() {
            out.extend(conv(&format!("main.block{i}.conv1"), &blk.conv1));
            out.extend(conv(&format!("main.block{i}.conv2"), &blk.conv2));
        }
        out.extend(conv("main.post", &self.post));
        out.push(("head.blur.w".into(), &self.head_blur.w));
        out.push(("head.blur.b".into(), &self.head_blur.b));
        out.push(("head.sigma.w".into(), &self.head_sigma.w));
        out.push(("head.sigma.b".into(), &self.head_sigma.b));
        out
    }

    /// Mutable parameter tensors in exactly the [`Self::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut TensorData<T>> {
        let mut out: Vec<&mut TensorData<T>> = Vec::new();
        out.push(&mut self.main_stem.w);
        out.push(&mut self.main_stem.b);
        if let Some(b) = &mut self.pos_branch {
            out.push(&mut b.stem.w);
            out.push(&mut b.stem.b);
            for blk in &mut b.blocks {
                out.push(&mut blk.conv1.w);
                out.push(&mut blk.conv1.b);
                out.push(&mut blk.conv2.w);
                out.push(&mut blk.conv2.b);
            }
        }
        if let Some(b) = &mut self.color_branch {
            out.push(&mut b.stem.w);
            out.push(&mut b.stem.b);
            for blk in &mut b.blocks {
                out.push(&mut blk.conv1.w);
                out.push(&mut blk.conv1.b);
                out.push(&mut blk.conv2.w);
                out.push(&mut blk.conv2.b);
            }
        }
        for blk in &mut self.main_blocks {
            out.push(&mut blk.conv1.w);
            out.push(&mut blk.conv1.b);
            out.push(&mut blk.conv2.w);
            out.push(&mut blk.conv2.b);
        }
        out.push(&mut self.post.w);
        out.push(&mut self.post.b);
        out.push(&mut self.head_blur.w);
        out.push(&mut self.head_blur.b);
        out.push(&mut self.head_sigma.w);
        out.push(&mut self.head_sigma.b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DdnModel<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            w: c.w.cast::<U>(),
            b: c.b.cast::<U>(),
        };
        let branch = |b: &BranchParams<T>| BranchParams {
            stem: conv(&b.stem),
            blocks: b
                .blocks
                .iter()
                .map(|blk| ResBlockParams {
                    conv1: conv(&blk.conv1),
                    conv2: conv(&blk.conv2),
                })
                .collect(),
        };
        DdnModel {
            cfg: self.cfg.clone(),
            main_stem: conv(&self.main_stem),
            pos_branch: self.pos_branch.as_ref().map(&branch),
            color_branch: self.color_branch.as_ref().map(&branch),
            main_blocks: self
                .main_blocks
                .iter()
                .map(|blk| ResBlockParams {
                    conv1: conv(&blk.conv1),
                    conv2: conv(&blk.conv2),
                })
                .collect(),
            post: conv(&self.post),
            head_blur: DenseParams {
                w: self.head_blur.w.cast::<U>(),
                b: self.head_blur.b.cast::<U>(),
            },
            head_sigma: DenseParams {
                w: self.head_sigma.w.cast::<U>(),
                b: self.head_sigma.b.cast::<U>(),
            },
        }
    }
}

impl DdnModel<f32> {
    pub fn to_checkpoint(&self) -> Vec<(String, TensorData<f32>)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Rebuild a model from named checkpoint tensors; topology comes from
    /// the config and every tensor must match by name and shape.
    pub fn from_checkpoint(
        cfg: &DdnConfig,
        tensors: &[(String, TensorData<f32>)],
    ) -> Result<Self, DdnError> {
        let mut model = Self::init(cfg, 0)?;
        let expected = model.named_tensors();
        if expected.len() != tensors.len() {
            return Err(DdnError::CheckpointMismatch(format!(
                "expected {} tensors, checkpoint has {}",
                expected.len(),
                tensors.len()
            )));
        }
        let names: Vec<String> = expected.iter().map(|(n, _)| n.clone()).collect();
        let shapes: Vec<Vec<usize>> = expected.iter().map(|(_, t)| t.shape.clone()).collect();
        for (i, slot) in model.tensors_mut().into_iter().enumerate() {
            let (name, data) = &tensors[i];
            if *name != names[i] {
                return Err(DdnError::CheckpointMismatch(format!(
                    "tensor {i}: expected `{}`, found `{name}`",
                    names[i]
                )));
            }
            if data.shape != shapes[i] {
                return Err(DdnError::CheckpointMismatch(format!(
                    "tensor `{name}`: shape {:?} vs expected {:?}",
                    data.shape, shapes[i]
                )));
            }
            *slot = data.clone();
        }
        Ok(model)
    }
}

/// Tape handles for the inserted parameter leaves, in `named_tensors` order.
pub struct ModelIds {
    pub ids: Vec<ValueId>,
}

impl<T: Scalar> DdnModel<T> {
    /// Copy every parameter onto a tape as leaves.
    pub fn insert_leaves(&self, tape: &mut Tape<T>, requires_grad: bool) -> ModelIds {
        let ids = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        ModelIds { ids }
    }
}

struct IdCursor<'a> {
    ids: &'a [ValueId],
    at: usize,
}

impl<'a> IdCursor<'a> {
    fn next2(&mut self) -> (ValueId, ValueId) {
        let pair = (self.ids[self.at], self.ids[self.at + 1]);
        self.at += 2;
        pair
    }
}

/// Intermediate tensors useful for inspection and invariants.
pub struct ForwardTrace {
    pub stem: ValueId,
    pub attn_pos: Option<ValueId>,
    pub attn_color: Option<ValueId>,
    pub fused: ValueId,
    pub pooled: ValueId,
}

pub struct ForwardOutput {
    /// Signed blur prediction, shape [n, 1].
    pub blur: ValueId,
    /// σ head output, shape [n, 1]: clamped log |σ̂| in log mode, raw σ̂ in
    /// raw mode.
    pub sigma_head: ValueId,
    pub trace: ForwardTrace,
}

fn resblock<T: Scalar>(
    tape: &mut Tape<T>,
    cur: &mut IdCursor,
    x: ValueId,
) -> Result<ValueId, DdnError> {
    let (w1, b1) = cur.next2();
    let (w2, b2) = cur.next2();
    let h = tape.conv2d(x, w1, b1)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, w2, b2)?;
    Ok(tape.add(x, h)?)
}

fn attention_branch<T: Scalar>(
    tape: &mut Tape<T>,
    cur: &mut IdCursor,
    main_input: ValueId,
    extra: ValueId,
    blocks: usize,
) -> Result<ValueId, DdnError> {
    let stacked = tape.concat_channels(main_input, extra)?;
    let (w, b) = cur.next2();
    let mut h = tape.conv2d(stacked, w, b)?;
    for _ in 0..blocks {
        h = resblock(tape, cur, h)?;
    }
    Ok(tape.sigmoid(h))
}

impl<T: Scalar> DdnModel<T> {
    /// Batched forward pass. `main` is [n, in_ch, s, s]; `pos`/`color` are
    /// [n, 2, s, s] and are consumed only by enabled branches (a disabled
    /// branch contributes the all-ones attention map, i.e. is skipped).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ids: &ModelIds,
        main: ValueId,
        pos: ValueId,
        color: ValueId,
    ) -> Result<ForwardOutput, DdnError> {
        let mut cur = IdCursor {
            ids: &ids.ids,
            at: 0,
        };
        let (w, b) = cur.next2();
        let stem = tape.conv2d(main, w, b)?;
        let attn_pos = if self.pos_branch.is_some() {
            Some(attention_branch(tape, &mut cur, main, pos, self.cfg.resblocks)?)
        } else {
            None
        };
        let attn_color = if self.color_branch.is_some() {
            Some(attention_branch(
                tape,
                &mut cur,
                main,
                color,
                self.cfg.resblocks,
            )?)
        } else {
            None
        };
        let mut fused = stem;
        if let Some(a) = attn_pos {
            fused = tape.mul(fused, a)?;
        }
        if let Some(a) = attn_color {
            fused = tape.mul(fused, a)?;
        }
        let mut h = fused;
        for _ in 0..self.cfg.resblocks {
            h = resblock(tape, &mut cur, h)?;
        }
        let (w, b) = cur.next2();
        let h = tape.conv2d(h, w, b)?;
        let h = tape.maxpool2(h)?;
        let h = tape.relu(h);
        let pooled = tape.global_avg_pool(h)?;
        let (w, b) = cur.next2();
        let blur = tape.dense(pooled, w, b)?;
        let (w, b) = cur.next2();
        let sigma_raw = tape.dense(pooled, w, b)?;
        let sigma_head = match self.cfg.sigma_param {
            SigmaParam::Log => tape.clamp(
                sigma_raw,
                T::from_f64(self.cfg.log_sigma_clamp.0),
                T::from_f64(self.cfg.log_sigma_clamp.1),
            ),
            SigmaParam::Raw => sigma_raw,
        };
        debug_assert_eq!(cur.at, ids.ids.len());
        Ok(ForwardOutput {
            blur,
            sigma_head,
            trace: ForwardTrace {
                stem,
                attn_pos,
                attn_color,
                fused,
                pooled,
            },
        })
    }
}
