//! The binary vision transformer, its ablation variants and the
//! full-precision twin used as a teacher.
//!
//! Layout inside a block (binary model):
//!
//! ```text
//! h   = LN(x)
//! Q,K = BL(h) + h                      or  cat(BL(h_low), BL(h_high)) + h
//! V   = BL(h) + h
//! A   = att_bin(softmax(B(Q) B(K)ᵀ / √d))
//! O   = A ⊗ B(V)                        or  β V + α (A/a) ⊗ B(V) − γ Ψ(B(V))
//! x   = x + BL(O) + O
//! x   = x + BL(act(BL(LN(x))))
//! ```
//!
//! `BL` binarizes its input with its own learnable RSign before the packed
//! product. Patch embedding, layer norms and the classifier stay full
//! precision.

mod audit;
mod checkpoint;
mod config;

pub use audit::{audit_tape, Audit};
pub use checkpoint::{Checkpoint, Record, TensorData, MAGIC, VERSION};
pub use config::{parse_kv, ModelConfig, Variant};
pub(crate) use config::{parse_value, reject_unknown};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Band, BinarizeMode, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::diba::{init_beta, DibaParams, NEIGHBORHOOD_KERNEL};
use crate::{Error, Real, Result, Tensor};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    /// RSign `(a, b)` applied to the input; `None` for a float layer.
    input: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
enum QkProj {
    Plain {
        q: Linear,
        k: Linear,
    },
    Freq {
        q_low: Linear,
        q_high: Linear,
        k_low: Linear,
        k_high: Linear,
    },
}

#[derive(Clone, Debug)]
struct Act {
    m: ParamId,
    n: ParamId,
    k: ParamId,
    t: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct DibaIds {
    alpha: ParamId,
    beta: ParamId,
    gamma: ParamId,
}

#[derive(Clone, Debug)]
struct BinaryAttn {
    q_sign: (ParamId, ParamId),
    k_sign: (ParamId, ParamId),
    v_sign: (ParamId, ParamId),
    att: (ParamId, ParamId),
    diba: Option<DibaIds>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    qk: QkProj,
    v: Linear,
    o: Linear,
    binary: Option<BinaryAttn>,
    ln2: (ParamId, ParamId),
    fc1: Linear,
    act: Act,
    fc2: Linear,
}

/// Nodes of interest produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Binarized attention of every block (binary model only).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
    psi: Option<ParamId>,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    binary: bool,
}

impl<T: Real> Builder<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lit(dist.sample(self.rng))).collect();
        self.store.add(
            name,
            Tensor::new(shape, data).expect("shape"),
            ParamKind::Weight,
        )
    }

    fn full(&mut self, name: String, shape: &[usize], v: f64, kind: ParamKind) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::lit(v)), kind)
    }

    fn sign_params(&mut self, prefix: &str, a: f64, b: f64) -> (ParamId, ParamId) {
        (
            self.full(format!("{prefix}.a"), &[1], a, ParamKind::Scale),
            self.full(format!("{prefix}.b"), &[1], b, ParamKind::Free),
        )
    }

    fn linear(&mut self, name: &str, out_f: usize, in_f: usize) -> Linear {
        let w = self.normal(format!("{name}.w"), &[out_f, in_f]);
        let input = self
            .binary
            .then(|| self.sign_params(&format!("{name}.in"), 1.0, 0.0));
        Linear { w, input }
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        (
            self.full(format!("{name}.g"), &[c], 1.0, ParamKind::Free),
            self.full(format!("{name}.b"), &[c], 0.0, ParamKind::Free),
        )
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
            binary: config.binary,
        };
        let c = config.embed_dim;
        let n = config.tokens();
        let hidden = config.hidden_dim();

        let patch_w = b.normal("patch_embed.w".into(), &[c, config.patch_dim()]);
        let patch_b = b.full("patch_embed.b".into(), &[c], 0.0, ParamKind::Free);
        let pos = b.normal("pos_embed".into(), &[n, c]);
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("blocks.{l}");
            let ln1 = b.norm(&format!("{p}.ln1"), c);
            let qk = if config.use_hfsc {
                QkProj::Freq {
                    q_low: b.linear(&format!("{p}.q_low"), c / 2, c),
                    q_high: b.linear(&format!("{p}.q_high"), c / 2, c),
                    k_low: b.linear(&format!("{p}.k_low"), c / 2, c),
                    k_high: b.linear(&format!("{p}.k_high"), c / 2, c),
                }
            } else {
                QkProj::Plain {
                    q: b.linear(&format!("{p}.q"), c, c),
                    k: b.linear(&format!("{p}.k"), c, c),
                }
            };
            let v = b.linear(&format!("{p}.v"), c, c);
            let binary = config.binary.then(|| {
                let diba = config.use_diba.then(|| {
                    let d = DibaParams::<f64>::default();
                    DibaIds {
                        alpha: b.full(
                            format!("{p}.diba.alpha"),
                            &[1],
                            d.alpha,
                            ParamKind::NonNegative,
                        ),
                        beta: b.full(format!("{p}.diba.beta"), &[1], d.beta, ParamKind::Free),
                        gamma: b.full(
                            format!("{p}.diba.gamma"),
                            &[1],
                            d.gamma,
                            ParamKind::NonNegative,
                        ),
                    }
                });
                BinaryAttn {
                    q_sign: b.sign_params(&format!("{p}.q_sign"), 1.0, 0.0),
                    k_sign: b.sign_params(&format!("{p}.k_sign"), 1.0, 0.0),
                    v_sign: b.sign_params(&format!("{p}.v_sign"), 1.0, 0.0),
                    att: b.sign_params(&format!("{p}.att"), 1.0, 0.5),
                    diba,
                }
            });
            let o = b.linear(&format!("{p}.o"), c, c);
            let ln2 = b.norm(&format!("{p}.ln2"), c);
            let fc1 = b.linear(&format!("{p}.fc1"), hidden, c);
            let act = Act {
                m: b.full(format!("{p}.act.m"), &[hidden], 0.0, ParamKind::Free),
                n: b.full(format!("{p}.act.n"), &[hidden], 0.0, ParamKind::Free),
                k: b.full(format!("{p}.act.k"), &[hidden], 0.25, ParamKind::Free),
                t: config
                    .use_irprelu
                    .then(|| b.full(format!("{p}.act.t"), &[n], 0.0, ParamKind::Free)),
            };
            let fc2 = b.linear(&format!("{p}.fc2"), c, hidden);
            blocks.push(Block {
                ln1,
                qk,
                v,
                o,
                binary,
                ln2,
                fc1,
                act,
                fc2,
            });
        }
        let ln_f = b.norm("norm", c);
        let head_w = b.normal("head.w".into(), &[config.classes, c]);
        let head_b = b.full("head.b".into(), &[config.classes], 0.0, ParamKind::Free);
        let psi = config.use_diba.then(|| {
            let k = Tensor::new(&[9], NEIGHBORHOOD_KERNEL.map(T::lit).to_vec()).expect("9 taps");
            b.store.add_frozen("psi", k)
        });
        Ok(Self {
            config,
            store: b.store,
            patch_w,
            patch_b,
            pos,
            blocks,
            ln_f,
            head_w,
            head_b,
            psi,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_elements()
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, l: &Linear) -> Result<Var> {
        let w = tape.param(&self.store, l.w)?;
        match l.input {
            Some((a, b)) => {
                let xb = self.sign(tape, x, (a, b))?;
                tape.binary_linear(xb, w)
            }
            None => tape.linear(x, w),
        }
    }

    fn sign(&self, tape: &mut Tape<T>, x: Var, (a, b): (ParamId, ParamId)) -> Result<Var> {
        let a = tape.param(&self.store, a)?;
        let b = tape.param(&self.store, b)?;
        tape.rsign(x, a, b)
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let g = tape.param(&self.store, g)?;
        let b = tape.param(&self.store, b)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Rearrange `[batch, C, S, S]` images into `[batch·N, C·p·p]` patches.
    pub fn patchify(&self, images: &[T], batch: usize) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let (s, p, ch) = (cfg.image_size, cfg.patch_size, cfg.in_channels);
        let per_image = ch * s * s;
        if images.len() != batch * per_image {
            return Err(Error::Length {
                expected: batch * per_image,
                got: images.len(),
            });
        }
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let g = cfg.grid_side();
        let pd = cfg.patch_dim();
        let mut out = vec![T::zero(); batch * g * g * pd];
        for b in 0..batch {
            let img = &images[b * per_image..(b + 1) * per_image];
            for gy in 0..g {
                for gx in 0..g {
                    let row = &mut out[((b * g + gy) * g + gx) * pd..][..pd];
                    for c in 0..ch {
                        for py in 0..p {
                            let src = &img[(c * s + gy * p + py) * s + gx * p..][..p];
                            row[(c * p + py) * p..][..p].copy_from_slice(src);
                        }
                    }
                }
            }
        }
        Tensor::new(&[batch * g * g, pd], out)
    }

    /// Record a forward pass; images are `[batch, C, S, S]` row-major.
    pub fn forward(&self, tape: &mut Tape<T>, images: &[T], batch: usize) -> Result<Forward> {
        let patches = self.patchify(images, batch)?;
        let x = tape.constant(patches)?;
        let x = self.embed(tape, x)?;
        self.forward_tokens(tape, x, batch)
    }

    fn embed(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.patch_w)?;
        let b = tape.param(&self.store, self.patch_b)?;
        let pos = tape.param(&self.store, self.pos)?;
        let x = tape.linear(patches, w)?;
        let x = tape.add_tiled(x, b)?;
        tape.add_tiled(x, pos)
    }

    /// Blocks, pooling and head on already embedded `[batch·N, C]` tokens.
    pub fn forward_tokens(&self, tape: &mut Tape<T>, mut x: Var, batch: usize) -> Result<Forward> {
        let n = self.config.tokens();
        if tape.value(x).shape() != [batch * n, self.config.embed_dim] {
            return Err(Error::Shape(format!(
                "expected [{}, {}] tokens, got {:?}",
                batch * n,
                self.config.embed_dim,
                tape.value(x).shape()
            )));
        }
        let mut attention = Vec::new();
        for block in &self.blocks {
            let (next, att) = self.block(tape, x, block)?;
            attention.extend(att);
            x = next;
        }
        let x = self.norm(tape, x, self.ln_f)?;
        let pooled = tape.mean_tokens(x, n)?;
        let w = tape.param(&self.store, self.head_w)?;
        let b = tape.param(&self.store, self.head_b)?;
        let logits = tape.linear(pooled, w)?;
        let logits = tape.add_tiled(logits, b)?;
        Ok(Forward { logits, attention })
    }

    /// The attention half of block `index` alone: `x + attention(LN(x))`.
    pub fn attention_block(&self, tape: &mut Tape<T>, x: Var, index: usize) -> Result<Var> {
        let blk = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Config(format!("no block {index}")))?;
        Ok(self.attention(tape, x, blk)?.0)
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, blk: &Block) -> Result<(Var, Option<Var>)> {
        let (x, att) = self.attention(tape, x, blk)?;
        let n = self.config.tokens();
        let h2 = self.norm(tape, x, blk.ln2)?;

        let f = self.linear(tape, h2, &blk.fc1)?;
        let a = &blk.act;
        let (m, nn, kk) = (
            tape.param(&self.store, a.m)?,
            tape.param(&self.store, a.n)?,
            tape.param(&self.store, a.k)?,
        );
        let t = match a.t {
            Some(t) => Some(tape.param(&self.store, t)?),
            None => None,
        };
        let f = tape.activation(f, m, nn, kk, t, n)?;
        let f = self.linear(tape, f, &blk.fc2)?;
        Ok((tape.add(x, f)?, att))
    }

    fn attention(&self, tape: &mut Tape<T>, x: Var, blk: &Block) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config;
        let (n, side, heads) = (cfg.tokens(), cfg.grid_side(), cfg.heads);
        let scale = T::one() / T::lit(cfg.head_dim() as f64).sqrt();
        let h = self.norm(tape, x, blk.ln1)?;
        let (q, k) = match &blk.qk {
            QkProj::Plain { q, k } => {
                let q = self.linear(tape, h, q)?;
                let k = self.linear(tape, h, k)?;
                if cfg.binary {
                    (tape.add(q, h)?, tape.add(k, h)?)
                } else {
                    (q, k)
                }
            }
            QkProj::Freq {
                q_low,
                q_high,
                k_low,
                k_high,
            } => {
                let low = tape.haar(h, Band::Low, side, side)?;
                let high = tape.haar(h, Band::High, side, side)?;
                let mut pair = |lo: &Linear, hi: &Linear| -> Result<Var> {
                    let a = self.linear(tape, low, lo)?;
                    let b = self.linear(tape, high, hi)?;
                    let cat = tape.concat(a, b)?;
                    tape.add(cat, h)
                };
                (pair(q_low, q_high)?, pair(k_low, k_high)?)
            }
        };
        let v = self.linear(tape, h, &blk.v)?;
        let (out, att) = match &blk.binary {
            None => {
                let s = tape.similarity_float(q, k, heads, n)?;
                let p = tape.softmax(s, scale)?;
                let o = tape.attn_apply(p, v, heads, n)?;
                (self.linear(tape, o, &blk.o)?, None)
            }
            Some(bin) => {
                let v = tape.add(v, h)?;
                let qb = self.sign(tape, q, bin.q_sign)?;
                let kb = self.sign(tape, k, bin.k_sign)?;
                let s = tape.similarity_binary(qb, kb, heads, n)?;
                let p = tape.softmax(s, scale)?;
                let att_a = tape.param(&self.store, bin.att.0)?;
                let att_b = tape.param(&self.store, bin.att.1)?;
                let att = tape.att_binarize(p, att_a, att_b)?;
                let vb = self.sign(tape, v, bin.v_sign)?;
                let agg = tape.attn_apply(att, vb, heads, n)?;
                let o = match bin.diba {
                    None => agg,
                    Some(d) => {
                        let alpha = tape.param(&self.store, d.alpha)?;
                        let beta = tape.param(&self.store, d.beta)?;
                        let gamma = tape.param(&self.store, d.gamma)?;
                        let psi = self
                            .psi
                            .ok_or_else(|| Error::Config("missing Ψ kernel".into()))?;
                        let psi = tape.param(&self.store, psi)?;
                        let ratio = tape.div_scalar(alpha, att_a)?;
                        let shortcut = tape.mul_scalar(v, beta)?;
                        let pos = tape.mul_scalar(agg, ratio)?;
                        let neigh = tape.stencil(vb, psi, side, side)?;
                        let neg = tape.mul_scalar(neigh, gamma)?;
                        let sum = tape.add(shortcut, pos)?;
                        tape.sub(sum, neg)?
                    }
                };
                let proj = self.linear(tape, o, &blk.o)?;
                (tape.add(proj, o)?, Some(att))
            }
        };
        Ok((tape.add(x, out)?, att))
    }

    /// Logits `[batch, classes]` from a hard-mode pass.
    pub fn predict(&self, images: &[T], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new(BinarizeMode::Hard);
        let f = self.forward(&mut tape, images, batch)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Set each block's `β` to `10 − k̄`, where `k̄` is the mean number of
    /// attention entries that survive binarization on `images`.
    pub fn calibrate_beta(&mut self, images: &[T], batch: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new(BinarizeMode::Hard);
        let f = self.forward(&mut tape, images, batch)?;
        let n = self.config.tokens();
        let mut betas = Vec::new();
        for (blk, att) in self.blocks.iter().zip(&f.attention) {
            let Some(d) = blk.binary.as_ref().and_then(|b| b.diba) else {
                continue;
            };
            let rows: Vec<Vec<T>> = tape
                .value(*att)
                .data()
                .chunks(n)
                .map(<[T]>::to_vec)
                .collect();
            let beta = init_beta(&rows)?;
            self.store.set_scalar(d.beta, beta);
            betas.push(beta);
        }
        Ok(betas)
    }

    /// Records of every parameter in creation order.
    pub fn param_records(&self) -> Vec<Record> {
        self.store
            .iter()
            .map(|(_, p)| Record::from_tensor(p.name.clone(), &p.value))
            .collect()
    }

    /// Load parameter values from matching records.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.get(id).name.clone();
            let rec = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let t = rec.to_tensor::<T>()?;
            if t.shape() != self.store.get(id).value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.store.get(id).value.shape()
                )));
            }
            self.store.get_mut(id).value = t;
        }
        Ok(())
    }

    /// Rebuild a model from a checkpoint whose config text holds the model keys.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut kv = parse_kv(&ckpt.config)?;
        let mut cfg = ModelConfig::toy();
        cfg.apply_kv(&mut kv)?;
        let mut model = Self::new(cfg)?;
        model.load_params(ckpt)?;
        Ok(model)
    }
}

/// `L = (1 − λ)·CE(student, labels) + λ·KL(teacher ‖ student)` at temperature 1.
///
/// `teacher` holds probabilities, one row per sample. With `λ = 0` the
/// teacher is ignored and the result is the plain cross-entropy.
pub fn distillation_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    teacher: Option<&Tensor<T>>,
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Lambda(lambda));
    }
    let ce = tape.cross_entropy(logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let teacher =
        teacher.ok_or_else(|| Error::Config("distillation needs teacher outputs".into()))?;
    let kl = tape.soft_target_kl(logits, teacher)?;
    if lambda == 1.0 {
        return Ok(kl);
    }
    let ce = tape.scale(ce, T::lit(1.0 - lambda))?;
    let kl = tape.scale(kl, T::lit(lambda))?;
    tape.add(ce, kl)
}

/// Row-wise softmax of `[rows, classes]` logits.
pub fn softmax_probs<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests;
