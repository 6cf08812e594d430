//! Small vision transformer with a DINO-style projection head.
//!
//! Pre-norm blocks, learned positional embeddings (bilinearly resampled
//! for inputs whose patch grid differs from the native one) and a prepended
//! class token. The head is a 3-layer MLP followed by an L2-normalised
//! bottleneck and a column-normalised prototype layer.

pub mod tape;

use ndarray::s;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
pub use tape::{Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    /// Number of prototypes (length of the projected logits).
    pub head_output_dim: usize,
    /// Native (global view) input size; positional embeddings live on its patch grid.
    pub input_size: usize,
    pub positional_embedding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 64,
            depth: 3,
            num_heads: 4,
            mlp_ratio: 4,
            head_hidden_dim: 128,
            head_bottleneck_dim: 64,
            head_output_dim: 256,
            input_size: 64,
            positional_embedding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("patch size, embed dim and head count must be positive");
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return bad("input_size must be a positive multiple of patch_size");
        }
        if self.mlp_ratio == 0
            || self.head_hidden_dim == 0
            || self.head_bottleneck_dim == 0
            || self.head_output_dim == 0
        {
            return bad("head and MLP dimensions must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn native_grid(&self) -> usize {
        self.input_size / self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Whether weight decay applies (false for biases, norms, tokens).
    pub decay: bool,
}

/// Ordered parameter list; order is part of the checkpoint format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Mat, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(
                format!("{} tensors", self.params.len()),
                format!("{} tensors", other.params.len()),
            ));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::shape(
                    format!("{} {:?}", a.name, a.value.dim()),
                    format!("{} {:?}", b.name, b.value.dim()),
                ));
            }
        }
        Ok(())
    }

    /// Squared L2 distance over all scalars.
    pub fn distance_sq(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (&a.value - &b.value).mapv(|d| d * d).sum())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockIds>,
    norm_g: usize,
    norm_b: usize,
    head: [usize; 6],
    prototypes: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    layout: Layout,
}

/// Per-image results of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_embedding: Vec<f64>,
    pub logits: Vec<f64>,
    /// `N x embed_dim`.
    pub patch_tokens: Mat,
    /// One `N x head_dim` matrix per head, from the last block.
    pub last_keys: Vec<Mat>,
    /// Per head, class-token attention over the `N` patches (class column dropped, renormalised).
    pub cls_attention: Vec<Vec<f64>>,
    pub grid: (usize, usize),
}

/// Tape handles of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// One leaf per parameter, in [`ParamStore`] order.
    pub params: Vec<Var>,
    /// `batch x head_output_dim`.
    pub logits: Var,
    /// `batch x embed_dim`.
    pub cls: Var,
    /// Final normalised tokens, `(batch * seq) x embed_dim`.
    pub tokens: Var,
    /// Last block fused q/k/v projection, `(batch * seq) x 3 embed_dim`.
    pub last_qkv: Var,
    pub last_attention: Var,
    pub batch: usize,
    pub grid: (usize, usize),
}

impl ForwardVars {
    pub fn seq_len(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }
}

/// Non-overlapping patches in row-major grid order; each row flattens a
/// patch as `(dy, dx, channel)` with the channel fastest.
pub fn patchify(image: &Image, patch: usize) -> Result<Mat> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            format!("image sides divisible by patch size {patch}"),
            format!("{h}x{w}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = CHANNELS * patch * patch;
    let data = image.data();
    let mut out = Mat::zeros((gh * gw, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for dy in 0..patch {
                let base = ((gy * patch + dy) * w + gx * patch) * CHANNELS;
                for v in &data[base..base + patch * CHANNELS] {
                    row[k] = *v as f64;
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Mat, patch: usize, height: usize, width: usize) -> Result<Image> {
    let (gh, gw) = (height / patch, width / patch);
    if patches.dim() != (gh * gw, CHANNELS * patch * patch) {
        return Err(Error::shape(
            format!("{}x{}", gh * gw, CHANNELS * patch * patch),
            format!("{:?}", patches.dim()),
        ));
    }
    let mut data = vec![0f32; height * width * CHANNELS];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row(gy * gw + gx);
            let mut k = 0;
            for dy in 0..patch {
                let base = ((gy * patch + dy) * width + gx * patch) * CHANNELS;
                for v in &mut data[base..base + patch * CHANNELS] {
                    *v = row[k] as f32;
                    k += 1;
                }
            }
        }
    }
    Image::from_vec(height, width, data)
}

/// Bilinear resampling matrix `(dst_h * dst_w) x (src_h * src_w)` for grid
/// values, half-pixel aligned.
fn grid_resample_matrix(src: (usize, usize), dst: (usize, usize)) -> Mat {
    let mut m = Mat::zeros((dst.0 * dst.1, src.0 * src.1));
    let axis = |i: usize, n_dst: usize, n_src: usize| -> (usize, usize, f64) {
        let f = ((i as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = f.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, f - lo as f64)
    };
    for i in 0..dst.0 {
        let (y0, y1, wy) = axis(i, dst.0, src.0);
        for j in 0..dst.1 {
            let (x0, x1, wx) = axis(j, dst.1, src.1);
            let r = i * dst.1 + j;
            m[[r, y0 * src.1 + x0]] += (1.0 - wy) * (1.0 - wx);
            m[[r, y0 * src.1 + x1]] += (1.0 - wy) * wx;
            m[[r, y1 * src.1 + x0]] += wy * (1.0 - wx);
            m[[r, y1 * src.1 + x1]] += wy * wx;
        }
    }
    m
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let layout = Self::build(&config, &mut store, &mut |_, _| {});
        Ok(Encoder { config, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Fresh parameters: N(0, 0.02) weights and tokens, zero biases, unit norm gains.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut store = ParamStore::default();
        Self::build(&self.config, &mut store, &mut |name, m| {
            if name.ends_with(".bias") || name.ends_with("beta") {
                m.fill(0.0);
            } else if name.ends_with("gamma") {
                m.fill(1.0);
            } else {
                m.mapv_inplace(|_| normal.sample(rng));
            }
        });
        store
    }

    fn build(
        cfg: &EncoderConfig,
        store: &mut ParamStore,
        init: &mut dyn FnMut(&str, &mut Mat),
    ) -> Layout {
        let d = cfg.embed_dim;
        let mut add = |store: &mut ParamStore, name: String, shape: (usize, usize), decay: bool| {
            let mut m = Mat::zeros(shape);
            init(&name, &mut m);
            store.add(name, m, decay)
        };
        let pdim = CHANNELS * cfg.patch_size * cfg.patch_size;
        let n = cfg.native_grid() * cfg.native_grid();
        let patch_w = add(store, "patch_embed.weight".into(), (pdim, d), true);
        let patch_b = add(store, "patch_embed.bias".into(), (1, d), false);
        let cls = add(store, "cls_token".into(), (1, d), false);
        let pos = add(store, "pos_embed".into(), (n + 1, d), false);
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|b| {
                let p = |s: &str| format!("blocks.{b}.{s}");
                BlockIds {
                    ln1_g: add(store, p("norm1.gamma"), (1, d), false),
                    ln1_b: add(store, p("norm1.beta"), (1, d), false),
                    qkv_w: add(store, p("attn.qkv.weight"), (d, 3 * d), true),
                    qkv_b: add(store, p("attn.qkv.bias"), (1, 3 * d), false),
                    proj_w: add(store, p("attn.proj.weight"), (d, d), true),
                    proj_b: add(store, p("attn.proj.bias"), (1, d), false),
                    ln2_g: add(store, p("norm2.gamma"), (1, d), false),
                    ln2_b: add(store, p("norm2.beta"), (1, d), false),
                    fc1_w: add(store, p("mlp.fc1.weight"), (d, hidden), true),
                    fc1_b: add(store, p("mlp.fc1.bias"), (1, hidden), false),
                    fc2_w: add(store, p("mlp.fc2.weight"), (hidden, d), true),
                    fc2_b: add(store, p("mlp.fc2.bias"), (1, d), false),
                }
            })
            .collect();
        let norm_g = add(store, "norm.gamma".into(), (1, d), false);
        let norm_b = add(store, "norm.beta".into(), (1, d), false);
        let (hh, hb) = (cfg.head_hidden_dim, cfg.head_bottleneck_dim);
        let head = [
            add(store, "head.mlp0.weight".into(), (d, hh), true),
            add(store, "head.mlp0.bias".into(), (1, hh), false),
            add(store, "head.mlp1.weight".into(), (hh, hh), true),
            add(store, "head.mlp1.bias".into(), (1, hh), false),
            add(store, "head.mlp2.weight".into(), (hh, hb), true),
            add(store, "head.mlp2.bias".into(), (1, hb), false),
        ];
        let prototypes = add(
            store,
            "head.prototypes.weight".into(),
            (hb, cfg.head_output_dim),
            true,
        );
        Layout {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g,
            norm_b,
            head,
            prototypes,
        }
    }

    /// Checks that `params` was produced for this configuration.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let reference = {
            let mut store = ParamStore::default();
            Self::build(&self.config, &mut store, &mut |_, _| {});
            store
        };
        reference.check_congruent(params)
    }

    /// Records a batched forward pass of same-sized images on `tape`.
    pub fn forward_batch(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        images: &[&Image],
        requires_grad: bool,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let first = images
            .first()
            .ok_or_else(|| Error::shape("at least one image", "empty batch"))?;
        let (h, w) = (first.height(), first.width());
        if images.iter().any(|im| (im.height(), im.width()) != (h, w)) {
            return Err(Error::shape(format!("{h}x{w} for every image"), "mixed sizes"));
        }
        let p = cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(
                format!("sides divisible by patch size {p}"),
                format!("{h}x{w}"),
            ));
        }
        let grid = (h / p, w / p);
        let n = grid.0 * grid.1;
        let batch = images.len();
        let pdim = CHANNELS * p * p;
        let mut stacked = Mat::zeros((batch * n, pdim));
        for (b, im) in images.iter().enumerate() {
            stacked
                .slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&patchify(im, p)?);
        }

        let pv: Vec<Var> = params
            .params
            .iter()
            .map(|prm| tape.leaf(prm.value.clone(), requires_grad))
            .collect();
        let l = &self.layout;
        let linear = |tape: &mut Tape, x: Var, wi: usize, bi: usize| {
            let y = tape.matmul(x, pv[wi]);
            tape.add_row(y, pv[bi])
        };
        let affine_norm = |tape: &mut Tape, x: Var, gi: usize, bi: usize| {
            let y = tape.layer_norm(x);
            let y = tape.mul_row(y, pv[gi]);
            tape.add_row(y, pv[bi])
        };

        let x_in = tape.leaf(stacked, false);
        let emb = linear(tape, x_in, l.patch_w, l.patch_b);
        let native = cfg.native_grid();
        let pos = if !cfg.positional_embedding {
            tape.leaf(Mat::zeros((n + 1, cfg.embed_dim)), false)
        } else if grid == (native, native) {
            pv[l.pos]
        } else {
            let inner = grid_resample_matrix((native, native), grid);
            let mut full = Mat::zeros((n + 1, native * native + 1));
            full[[0, 0]] = 1.0;
            full.slice_mut(s![1.., 1..]).assign(&inner);
            let m = tape.leaf(full, false);
            tape.matmul(m, pv[l.pos])
        };
        let mut x = tape.assemble_tokens(emb, pv[l.cls], pos, batch);

        let d = cfg.embed_dim;
        let mut last_qkv = x;
        let mut last_attention = x;
        for blk in &l.blocks {
            let hn = affine_norm(tape, x, blk.ln1_g, blk.ln1_b);
            let qkv = linear(tape, hn, blk.qkv_w, blk.qkv_b);
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, d);
            let v = tape.slice_cols(qkv, 2 * d, d);
            let att = tape.attention(q, k, v, batch, cfg.num_heads);
            let proj = linear(tape, att, blk.proj_w, blk.proj_b);
            x = tape.add(x, proj);
            let hn = affine_norm(tape, x, blk.ln2_g, blk.ln2_b);
            let hid = linear(tape, hn, blk.fc1_w, blk.fc1_b);
            let hid = tape.gelu(hid);
            let out = linear(tape, hid, blk.fc2_w, blk.fc2_b);
            x = tape.add(x, out);
            last_qkv = qkv;
            last_attention = att;
        }
        let tokens = affine_norm(tape, x, l.norm_g, l.norm_b);
        let seq = n + 1;
        let cls = tape.gather_rows(tokens, (0..batch).map(|b| b * seq).collect());

        let [w0, b0, w1, b1, w2, b2] = l.head;
        let hdn = linear(tape, cls, w0, b0);
        let hdn = tape.gelu(hdn);
        let hdn = linear(tape, hdn, w1, b1);
        let hdn = tape.gelu(hdn);
        let hdn = linear(tape, hdn, w2, b2);
        let hdn = tape.l2_normalize_rows(hdn);
        let protos = tape.l2_normalize_cols(pv[l.prototypes]);
        let logits = tape.matmul(hdn, protos);

        Ok(ForwardVars {
            params: pv,
            logits,
            cls,
            tokens,
            last_qkv,
            last_attention,
            batch,
            grid,
        })
    }

    /// Unpacks per-image outputs from a recorded forward pass.
    pub fn outputs(&self, tape: &Tape, fv: &ForwardVars) -> Vec<EncoderOutput> {
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
        let seq = fv.seq_len();
        let logits = tape.value(fv.logits);
        let cls = tape.value(fv.cls);
        let tokens = tape.value(fv.tokens);
        let qkv = tape.value(fv.last_qkv);
        let probs = if cfg.depth > 0 {
            tape.attention_probs(fv.last_attention)
        } else {
            None
        };
        (0..fv.batch)
            .map(|b| {
                let rows = b * seq + 1..(b + 1) * seq;
                let last_keys = if cfg.depth > 0 {
                    (0..heads)
                        .map(|h| {
                            qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh])
                                .to_owned()
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let cls_attention = probs
                    .map(|p| {
                        (0..heads)
                            .map(|h| {
                                let row = p[b * heads + h].row(0);
                                let patches = row.slice(s![1..]);
                                let total = patches.sum();
                                patches.iter().map(|v| v / total).collect()
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                EncoderOutput {
                    cls_embedding: cls.row(b).to_vec(),
                    logits: logits.row(b).to_vec(),
                    patch_tokens: tokens.slice(s![rows, ..]).to_owned(),
                    last_keys,
                    cls_attention,
                    grid: fv.grid,
                }
            })
            .collect()
    }

    /// Gradient-free single-image forward pass.
    pub fn forward(&self, params: &ParamStore, image: &Image) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let fv = self.forward_batch(params, &mut tape, &[image], false)?;
        Ok(self.outputs(&tape, &fv).remove(0))
    }

    /// Gradient-free logits for a batch of same-sized images.
    pub fn logits(&self, params: &ParamStore, images: &[&Image]) -> Result<Mat> {
        let mut tape = Tape::new();
        let fv = self.forward_batch(params, &mut tape, images, false)?;
        Ok(tape.value(fv.logits).clone())
    }
}

/// Head-averaged class-token attention reshaped to the patch grid.
pub fn attention_map(output: &EncoderOutput) -> Mat {
    let (gh, gw) = output.grid;
    let heads = output.cls_attention.len().max(1);
    let mut grid = Mat::zeros((gh, gw));
    for att in &output.cls_attention {
        for (i, v) in att.iter().enumerate() {
            grid[[i / gw, i % gw]] += v / heads as f64;
        }
    }
    grid
}
