//! U-Net and U-Net++ segmentation networks built on the [`crate::tensor`] tape.
//!
//! Both families take either a 1-channel raw image or the 3-channel
//! `(mu, nu, pi)` encoding and produce `K` logit maps at input resolution.
//!
//! * U-Net: `depth` pooling steps, so `depth + 1` levels with
//!   `base * 2^i` filters at level `i`.
//! * U-Net++: `depth` backbone levels `X(i,0)`, nested decoder nodes
//!   `X(i,j)` with `i + j < depth`, dense skips from every `X(i,0..j)`, and
//!   optional 1x1 supervision heads on each `X(0,j)`, `j >= 1`.
//!
//! Every parameter is initialised from its own RNG stream keyed by
//! `(seed, name)`, so two models that differ only in `in_channels` share
//! every tensor except the first convolution's weights.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{
    checkpoint, Graph, Mode, ParamId, ParamSet, RunningStats, Scalar, Tensor, Var,
};
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "unetpp")]
    UNetPP,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::UNet => "unet",
            Family::UNetPP => "unetpp",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(Family::UNet),
            "unetpp" | "unet++" | "u-net++" => Ok(Family::UNetPP),
            _ => Err(Error::InvalidConfig(format!("unknown family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: Family,
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Dropout after every conv layer; U-Net++ only.
    pub dropout_p: f64,
    /// Auxiliary heads on `X(0,j)`; U-Net++ only.
    pub deep_supervision: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            family: Family::UNet,
            depth: 4,
            base_filters: 32,
            in_channels: 3,
            num_classes: 4,
            dropout_p: 0.2,
            deep_supervision: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.depth > 8 {
            return bad(format!("depth {} is unreasonably deep", self.depth));
        }
        if self.base_filters < 1 {
            return bad("base_filters must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            ));
        }
        Ok(())
    }

    /// Inputs must survive `depth` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} is not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    fn uses_dropout(&self) -> bool {
        self.family == Family::UNetPP && self.dropout_p > 0.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

/// `[conv3x3 -> BN -> ReLU (-> dropout)] x 2`.
#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
    salt: u64,
    out_channels: usize,
}

#[derive(Debug, Clone)]
enum Topology {
    UNet {
        encoder: Vec<Block>,
        /// `ups[i]` lifts level `i + 1` to level `i`.
        ups: Vec<Conv>,
        decoder: Vec<Block>,
        head: Conv,
    },
    UNetPP {
        nodes: HashMap<(usize, usize), Block>,
        ups: HashMap<(usize, usize), Conv>,
        /// `(j, head)` pairs for the supervised `X(0,j)`.
        heads: Vec<(usize, Conv)>,
    },
}

/// Logits of a forward pass. `heads` lists every supervised output in
/// decoder order; the last entry is always `logits`.
#[derive(Debug, Clone)]
pub struct Output {
    pub logits: Var,
    pub heads: Vec<Var>,
}

impl Output {
    /// Auxiliary maps: all supervised outputs except the final one.
    pub fn auxiliary(&self) -> &[Var] {
        &self.heads[..self.heads.len() - 1]
    }
}

struct Builder<'a, T> {
    seed: u64,
    params: &'a mut ParamSet<T>,
    bn_names: Vec<String>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the model seed.
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    derive_seed(seed, h)
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let data = (0..cout * cin * k * k)
            .map(|_| T::of(normal.sample(&mut rng)))
            .collect();
        let w = self.params.add(
            format!("{name}.weight"),
            Tensor::new(&[cout, cin, k, k], data).expect("sized"),
        );
        let b = self
            .params
            .add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self
            .params
            .add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.bn_names.push(name.to_string());
        Norm {
            gamma,
            beta,
            stats: self.bn_names.len() - 1,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, salt: u64) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            bn1: self.norm(&format!("{name}.bn1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            bn2: self.norm(&format!("{name}.bn2"), cout),
            salt,
            out_channels: cout,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    values: Vec<Tensor<T>>,
    bn_stats: Vec<RunningStats<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    config: ArchConfig,
    params: ParamSet<T>,
    bn_names: Vec<String>,
    bn_stats: Vec<RunningStats<T>>,
    topology: Topology,
}

/// Per-forward state: bound parameter leaves and the dropout seed.
struct Ctx<'a, T> {
    g: &'a mut Graph<T>,
    vars: &'a [Var],
    mode: Mode,
    seed: u64,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder {
            seed,
            params: &mut params,
            bn_names: Vec::new(),
        };
        let cfg = &config;
        let topology = match cfg.family {
            Family::UNet => {
                let mut encoder = Vec::new();
                let mut cin = cfg.in_channels;
                for i in 0..=cfg.depth {
                    encoder.push(b.block(&format!("enc{i}"), cin, cfg.channels(i), i as u64));
                    cin = cfg.channels(i);
                }
                let mut ups = Vec::new();
                let mut decoder = Vec::new();
                for i in 0..cfg.depth {
                    ups.push(b.conv(&format!("up{i}"), cfg.channels(i + 1), cfg.channels(i), 3));
                    decoder.push(b.block(
                        &format!("dec{i}"),
                        2 * cfg.channels(i),
                        cfg.channels(i),
                        100 + i as u64,
                    ));
                }
                let head = b.conv("head", cfg.channels(0), cfg.num_classes, 1);
                Topology::UNet {
                    encoder,
                    ups,
                    decoder,
                    head,
                }
            }
            Family::UNetPP => {
                let d = cfg.depth;
                let mut nodes = HashMap::new();
                let mut ups = HashMap::new();
                // Build column by column so names follow the forward order.
                for j in 0..d {
                    for i in 0..d - j {
                        let salt = (i * 16 + j) as u64;
                        if j == 0 {
                            let cin = if i == 0 {
                                cfg.in_channels
                            } else {
                                cfg.channels(i - 1)
                            };
                            nodes.insert(
                                (i, 0),
                                b.block(&format!("x{i}_0"), cin, cfg.channels(i), salt),
                            );
                        } else {
                            ups.insert(
                                (i, j),
                                b.conv(
                                    &format!("up{i}_{j}"),
                                    cfg.channels(i + 1),
                                    cfg.channels(i),
                                    3,
                                ),
                            );
                            nodes.insert(
                                (i, j),
                                b.block(
                                    &format!("x{i}_{j}"),
                                    (j + 1) * cfg.channels(i),
                                    cfg.channels(i),
                                    salt,
                                ),
                            );
                        }
                    }
                }
                let supervised: Vec<usize> = if cfg.deep_supervision {
                    (1..d).collect()
                } else {
                    vec![d - 1]
                };
                let heads = supervised
                    .into_iter()
                    .map(|j| {
                        (
                            j,
                            b.conv(&format!("head{j}"), cfg.channels(0), cfg.num_classes, 1),
                        )
                    })
                    .collect();
                Topology::UNetPP { nodes, ups, heads }
            }
        };
        let bn_names = b.bn_names;
        let bn_stats = bn_names
            .iter()
            .map(|n| {
                let c = params
                    .get(params.find(&format!("{n}.gamma")).expect("bn gamma"))
                    .len();
                RunningStats::new(c)
            })
            .collect();
        let model = Model {
            config,
            params,
            bn_names,
            bn_stats,
            topology,
        };
        model.check_mirror_shapes()?;
        Ok(model)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.bn_stats
    }

    /// Output channel count of each U-Net encoder level, or of each U-Net++
    /// backbone node `X(i,0)`.
    pub fn encoder_channels(&self) -> Vec<usize> {
        match &self.topology {
            Topology::UNet { encoder, .. } => encoder.iter().map(|b| b.out_channels).collect(),
            Topology::UNetPP { nodes, .. } => (0..self.config.depth)
                .map(|i| nodes[&(i, 0)].out_channels)
                .collect(),
        }
    }

    /// Nested node coordinates `(i, j)` in forward order (U-Net++ only).
    pub fn nested_nodes(&self) -> Vec<(usize, usize)> {
        match &self.topology {
            Topology::UNet { .. } => Vec::new(),
            Topology::UNetPP { nodes, .. } => {
                let mut keys: Vec<_> = nodes.keys().copied().collect();
                keys.sort_by_key(|&(i, j)| (j, i));
                keys
            }
        }
    }

    pub fn head_count(&self) -> usize {
        match &self.topology {
            Topology::UNet { .. } => 1,
            Topology::UNetPP { heads, .. } => heads.len(),
        }
    }

    /// Walks the topology with symbolic spatial sizes (multiples of the
    /// coarsest grid) and checks every skip concatenation joins equal sizes.
    fn check_mirror_shapes(&self) -> Result<()> {
        let d = self.config.depth;
        let size_at = |level: usize| 1usize << (d - level);
        let mismatch = |what: String| Err(Error::ShapeMismatch(format!("mirror shapes: {what}")));
        match &self.topology {
            Topology::UNet { encoder, .. } => {
                for i in (0..d).rev() {
                    let skip = size_at(i);
                    let up = 2 * size_at(i + 1);
                    if skip != up || encoder[i].out_channels != self.config.channels(i) {
                        return mismatch(format!("decoder level {i}: {skip} vs {up}"));
                    }
                }
            }
            Topology::UNetPP { nodes, .. } => {
                for (&(i, j), _) in nodes.iter().filter(|(k, _)| k.1 > 0) {
                    let up = 2 * size_at(i + 1);
                    for jj in 0..j {
                        if !nodes.contains_key(&(i, jj)) || size_at(i) != up {
                            return mismatch(format!("node ({i},{j}) dense skip from ({i},{jj})"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv(&self, cx: &mut Ctx<'_, T>, c: Conv, x: Var) -> Result<Var> {
        cx.g.conv2d(x, cx.vars[c.w.index()], Some(cx.vars[c.b.index()]))
    }

    fn block(&mut self, cx: &mut Ctx<'_, T>, blk: Block, x: Var) -> Result<Var> {
        let dropout = self.config.uses_dropout();
        let p = self.config.dropout_p;
        let mut h = x;
        for (layer, (conv, bn)) in [(blk.conv1, blk.bn1), (blk.conv2, blk.bn2)]
            .into_iter()
            .enumerate()
        {
            h = self.conv(cx, conv, h)?;
            h = cx.g.batch_norm(
                h,
                cx.vars[bn.gamma.index()],
                cx.vars[bn.beta.index()],
                &mut self.bn_stats[bn.stats],
                cx.mode,
            )?;
            h = cx.g.relu(h);
            if dropout {
                let seed = derive_seed(cx.seed, blk.salt * 2 + layer as u64);
                h = cx.g.dropout(h, p, cx.mode, seed)?;
            }
        }
        Ok(h)
    }

    fn up(&self, cx: &mut Ctx<'_, T>, c: Conv, x: Var) -> Result<Var> {
        let u = cx.g.upsample2x(x)?;
        self.conv(cx, c, u)
    }

    /// Runs the network on an `(N, in_channels, H, W)` input already recorded
    /// on `g`. Parameters are bound as fresh leaves; their order matches
    /// [`ParamSet::bind`], and the bound vars are returned for gradient
    /// collection. `seed` drives dropout masks in train mode.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        seed: u64,
    ) -> Result<(Output, Vec<Var>)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_input(h, w)?;
        let vars = self.params.bind(g);
        let topology = self.topology.clone();
        let mut cx = Ctx {
            g,
            vars: &vars,
            mode,
            seed,
        };
        let out = match topology {
            Topology::UNet {
                encoder,
                ups,
                decoder,
                head,
            } => {
                let mut skips = Vec::with_capacity(encoder.len());
                let mut cur = x;
                for (i, blk) in encoder.iter().enumerate() {
                    if i > 0 {
                        cur = cx.g.max_pool2x2(cur)?;
                    }
                    cur = self.block(&mut cx, *blk, cur)?;
                    skips.push(cur);
                }
                for i in (0..self.config.depth).rev() {
                    let u = self.up(&mut cx, ups[i], cur)?;
                    let cat = cx.g.concat_channels(skips[i], u)?;
                    cur = self.block(&mut cx, decoder[i], cat)?;
                }
                let logits = self.conv(&mut cx, head, cur)?;
                Output {
                    logits,
                    heads: vec![logits],
                }
            }
            Topology::UNetPP { nodes, ups, heads } => {
                let d = self.config.depth;
                let mut out: HashMap<(usize, usize), Var> = HashMap::new();
                let mut cur = x;
                for i in 0..d {
                    if i > 0 {
                        cur = cx.g.max_pool2x2(cur)?;
                    }
                    cur = self.block(&mut cx, nodes[&(i, 0)], cur)?;
                    out.insert((i, 0), cur);
                }
                for j in 1..d {
                    for i in 0..d - j {
                        let u = self.up(&mut cx, ups[&(i, j)], out[&(i + 1, j - 1)])?;
                        let mut parts: Vec<Var> = (0..j).map(|jj| out[&(i, jj)]).collect();
                        parts.push(u);
                        let cat = cx.g.concat_many(&parts)?;
                        let v = self.block(&mut cx, nodes[&(i, j)], cat)?;
                        out.insert((i, j), v);
                    }
                }
                let maps = heads
                    .iter()
                    .map(|&(j, conv)| self.conv(&mut cx, conv, out[&(0, j)]))
                    .collect::<Result<Vec<_>>>()?;
                Output {
                    logits: *maps.last().expect("at least one head"),
                    heads: maps,
                }
            }
        };
        Ok((out, vars))
    }

    /// Mean softmax cross-entropy over every supervised head.
    pub fn loss(&self, g: &mut Graph<T>, out: &Output, onehot: &Tensor<T>) -> Result<Var> {
        let losses = out
            .heads
            .iter()
            .map(|&h| g.softmax_cross_entropy(h, onehot))
            .collect::<Result<Vec<_>>>()?;
        g.average(&losses)
    }

    /// Named tensors for checkpointing: parameters, then batch-norm running
    /// statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect();
        for (name, s) in self.bn_names.iter().zip(&self.bn_stats) {
            let c = s.mean.len();
            let cast =
                |v: &[T]| Tensor::<f32>::new(&[c], v.iter().map(|x| x.as_f64() as f32).collect());
            out.push((
                format!("{name}.running_mean"),
                cast(&s.mean).expect("sized"),
            ));
            out.push((format!("{name}.running_var"), cast(&s.var).expect("sized")));
        }
        out
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let cast: Vec<(String, Tensor<T>)> =
            entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        self.params.load_named(&cast)?;
        for (name, s) in self.bn_names.iter().zip(self.bn_stats.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{name}.{suffix}");
                let (_, t) = cast
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if t.len() != dst.len() {
                    return Err(Error::Checkpoint(format!(
                        "{key}: wrong length {}",
                        t.len()
                    )));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named_tensors())
    }

    pub fn load(config: ArchConfig, path: &Path) -> Result<Self> {
        let mut model = Model::build(config, 0)?;
        model.load_named(&checkpoint::load(path)?)?;
        Ok(model)
    }

    /// In-memory copy of parameters and running statistics.
    pub fn state(&self) -> ModelState<T> {
        ModelState {
            values: self.params.values().to_vec(),
            bn_stats: self.bn_stats.clone(),
        }
    }

    pub fn restore(&mut self, state: &ModelState<T>) {
        let (values, _) = self.params.values_and_grads_mut();
        values.clone_from_slice(&state.values);
        self.bn_stats.clone_from(&state.bn_stats);
    }
}
