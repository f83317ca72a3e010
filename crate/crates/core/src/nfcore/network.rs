use std::collections::BTreeSet;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Arch, ModelConfig, NormStrategy};
use super::mbn::{check_gamma, Branch, MbnState, Mode, RunningStats};
use super::params::{ParamKind, ParamStore, ParamVars};
use crate::autograd::{BatchMoments, Graph, Tensor, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::seeding::{self, stream};

/// Which mixture-BN layers blend their two branches during interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSet {
    /// No layer mixes: two full forward passes, logits interpolated.
    None,
    All,
    Layers(BTreeSet<usize>),
}

impl MixSet {
    fn contains(&self, site: usize) -> bool {
        match self {
            MixSet::None => false,
            MixSet::All => true,
            MixSet::Layers(s) => s.contains(&site),
        }
    }

    /// A seeded random subset holding `round(fraction * sites)` layers.
    pub fn random_fraction(sites: usize, fraction: f64, seed: u64) -> Result<MixSet> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(arg_err(format!("mix fraction must be in [0, 1], got {fraction}")));
        }
        let take = (fraction * sites as f64).round() as usize;
        let mut idx: Vec<usize> = (0..sites).collect();
        let mut rng = seeding::rng(seed, &[stream::MIX_SET]);
        for i in 0..take {
            let j = rng.random_range(i..sites);
            idx.swap(i, j);
        }
        Ok(MixSet::Layers(idx[..take].iter().copied().collect()))
    }
}

/// How samples are routed through mixture-BN layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// No routing; only valid for models without mixture-BN.
    Unrouted,
    Branch(Branch),
    /// Eval-only blend of the two branches with weight `gamma` on the adversarial one.
    Interpolate { gamma: f64, mix: MixSet },
}

impl Routing {
    pub const CLEAN: Routing = Routing::Branch(Branch::Clean);
    pub const ADV: Routing = Routing::Branch(Branch::Adv);
}

/// Statistics of one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteStats {
    None,
    Bn(RunningStats),
    Mbn(MbnState),
}

/// A running-statistics update produced by a train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub site: usize,
    /// `None` for plain BN.
    pub branch: Option<Branch>,
    pub moments: BatchMoments,
}

/// Running statistics at one layer, as returned by the statistics probe.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerStats {
    Bn(Vec<(f64, f64)>),
    Mbn {
        clean: Vec<(f64, f64)>,
        adv: Vec<(f64, f64)>,
    },
}

pub struct Forward<'g> {
    pub logits: Var<'g>,
    pub updates: Vec<StatUpdate>,
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    /// Per-output gain and bias of standardized layers.
    gain_bias: Option<(usize, usize)>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    gain: Option<usize>,
    bias: Option<usize>,
}

#[derive(Debug, Clone)]
struct Site {
    /// `(scale, shift)` per branch: one pair, or clean then adv for mixture-BN.
    affine: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Block {
    site1: usize,
    conv1: Conv,
    site2: usize,
    conv2: Conv,
    shortcut: Option<Conv>,
    /// `1 / beta` of normalizer-free blocks (expected input std).
    nf_inv_beta: f64,
}

#[derive(Debug, Clone)]
enum Plan {
    Resnet {
        stem: Conv,
        blocks: Vec<Block>,
        final_site: usize,
        head: Dense,
    },
    Mlp {
        hidden: Vec<Dense>,
        head: Dense,
    },
}

/// A residual or dense classifier with a fixed normalization strategy.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    params: ParamStore,
    stats: Vec<SiteStats>,
    sites: Vec<Site>,
    plan: Plan,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    params: ParamStore,
    stats: Vec<SiteStats>,
    sites: Vec<Site>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        ArrayD::from_shape_fn(IxDyn(shape), |_| d.sample(rng))
    }

    fn standardized(&self) -> bool {
        self.cfg.norm == NormStrategy::Nf
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan = cin * k * k;
        // Standardization makes the forward pass scale-free, but the raw scale
        // still sets the effective step size, so NF layers get He init too.
        let w = self.normal(&[cout, cin, k, k], (2.0 / fan as f64).sqrt());
        let w = self.params.push(format!("{name}.w"), ParamKind::Weight, w);
        let gain_bias = self.standardized().then(|| {
            let g = self.params.push(format!("{name}.gain"), ParamKind::Gain, ArrayD::ones(IxDyn(&[cout])));
            let b = self.params.push(format!("{name}.b"), ParamKind::Bias, ArrayD::zeros(IxDyn(&[cout])));
            (g, b)
        });
        Conv {
            w,
            gain_bias,
            stride,
            pad: k / 2,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, head: bool) -> Dense {
        let followed_by_norm = !head && self.cfg.norm.has_norm_layers();
        let std = if head {
            (1.0 / din as f64).sqrt()
        } else {
            (2.0 / din as f64).sqrt()
        };
        let w = self.normal(&[dout, din], std);
        let w = self.params.push(format!("{name}.w"), ParamKind::Weight, w);
        let gain = self
            .standardized()
            .then(|| self.params.push(format!("{name}.gain"), ParamKind::Gain, ArrayD::ones(IxDyn(&[dout]))));
        let bias = (!followed_by_norm)
            .then(|| self.params.push(format!("{name}.b"), ParamKind::Bias, ArrayD::zeros(IxDyn(&[dout]))));
        Dense { w, gain, bias }
    }

    /// Registers the next normalization site; a no-op slot for NF/none models.
    fn site(&mut self, channels: usize) -> usize {
        let k = self.sites.len();
        let norm = self.cfg.norm;
        let mut affine = Vec::new();
        let branches: &[&str] = match norm {
            NormStrategy::Mbn => &["clean.", "adv."],
            NormStrategy::Bn | NormStrategy::In => &[""],
            NormStrategy::Nf | NormStrategy::None => &[],
        };
        for b in branches {
            let s = self.params.push(
                format!("norm.{k}.{b}scale"),
                ParamKind::NormAffine,
                ArrayD::ones(IxDyn(&[channels])),
            );
            let t = self.params.push(
                format!("norm.{k}.{b}shift"),
                ParamKind::NormAffine,
                ArrayD::zeros(IxDyn(&[channels])),
            );
            affine.push((s, t));
        }
        self.stats.push(match norm {
            NormStrategy::Bn => SiteStats::Bn(RunningStats::new(channels)),
            NormStrategy::Mbn => SiteStats::Mbn(MbnState::new(channels, self.cfg.bn_momentum)),
            _ => SiteStats::None,
        });
        self.sites.push(Site { affine });
        k
    }
}

/// One or two activation streams (two while mixture-BN branches run apart).
#[derive(Clone, Copy)]
enum Streams<'g> {
    One(Var<'g>),
    Two(Var<'g>, Var<'g>),
}

impl<'g> Streams<'g> {
    fn map(self, mut f: impl FnMut(Var<'g>) -> Result<Var<'g>>) -> Result<Self> {
        Ok(match self {
            Streams::One(a) => Streams::One(f(a)?),
            Streams::Two(a, b) => Streams::Two(f(a)?, f(b)?),
        })
    }

    fn add(self, g: &'g Graph, other: Streams<'g>) -> Result<Self> {
        Ok(match (self, other) {
            (Streams::One(a), Streams::One(b)) => Streams::One(g.add(a, b)?),
            (Streams::One(a), Streams::Two(b, c)) | (Streams::Two(b, c), Streams::One(a)) => {
                Streams::Two(g.add(a, b)?, g.add(a, c)?)
            }
            (Streams::Two(a, b), Streams::Two(c, d)) => Streams::Two(g.add(a, c)?, g.add(b, d)?),
        })
    }
}

struct Ctx<'a, 'g> {
    g: &'g Graph,
    pv: &'a ParamVars<'g>,
    routing: &'a Routing,
    mode: Mode,
    updates: Vec<StatUpdate>,
}

impl Network {
    /// Builds and initializes a network; `seed` fixes every initial weight.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg: &cfg,
            params: ParamStore::new(),
            stats: Vec::new(),
            sites: Vec::new(),
            rng: seeding::rng(seed, &[stream::INIT]),
        };
        let plan = match cfg.arch {
            Arch::Resnet => {
                let [cin, _, _] = cfg.input_shape;
                let w = cfg.width;
                let stem = b.conv("stem", cin, w, 3, 1);
                let mut blocks = Vec::new();
                let mut cur = w;
                let mut expected_var = 1.0;
                let alpha = cfg.nf_alpha;
                for stage in 0..3 {
                    let out = w << stage;
                    for i in 0..cfg.blocks_per_stage() {
                        let name = format!("blocks.{}", blocks.len());
                        let transition = stage > 0 && i == 0;
                        let stride = if transition { 2 } else { 1 };
                        let nf_inv_beta = 1.0 / f64::sqrt(expected_var);
                        let site1 = b.site(cur);
                        let conv1 = b.conv(&format!("{name}.conv1"), cur, out, 3, stride);
                        let site2 = b.site(out);
                        let conv2 = b.conv(&format!("{name}.conv2"), out, out, 3, 1);
                        let shortcut = (cur != out || stride != 1)
                            .then(|| b.conv(&format!("{name}.shortcut"), cur, out, 1, stride));
                        expected_var = if shortcut.is_some() { 1.0 + alpha * alpha } else { expected_var + alpha * alpha };
                        blocks.push(Block {
                            site1,
                            conv1,
                            site2,
                            conv2,
                            shortcut,
                            nf_inv_beta,
                        });
                        cur = out;
                    }
                }
                let final_site = b.site(cur);
                let head = b.dense("head", cur, cfg.num_classes, true);
                Plan::Resnet {
                    stem,
                    blocks,
                    final_site,
                    head,
                }
            }
            Arch::Mlp => {
                let mut hidden = Vec::new();
                let mut din = cfg.input_dim();
                for i in 0..cfg.depth - 1 {
                    hidden.push(b.dense(&format!("fc.{i}"), din, cfg.width, false));
                    b.site(cfg.width);
                    din = cfg.width;
                }
                let head = b.dense("head", din, cfg.num_classes, true);
                Plan::Mlp { hidden, head }
            }
        };
        debug_assert_eq!(b.sites.len(), cfg.num_norm_sites());
        let Builder {
            params, stats, sites, ..
        } = b;
        Ok(Self {
            cfg,
            params,
            stats,
            sites,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn norm(&self) -> NormStrategy {
        self.cfg.norm
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn site_stats(&self) -> &[SiteStats] {
        &self.stats
    }

    pub fn site_stats_mut(&mut self) -> &mut [SiteStats] {
        &mut self.stats
    }

    pub fn num_norm_sites(&self) -> usize {
        self.sites.len()
    }

    /// Builds the forward pass on `g`. Train mode returns the statistics
    /// updates without applying them; see [`Network::commit`].
    pub fn forward_graph<'g>(
        &self,
        g: &'g Graph,
        pv: &ParamVars<'g>,
        x: Var<'g>,
        routing: &Routing,
        mode: Mode,
    ) -> Result<Forward<'g>> {
        self.check_routing(routing, mode)?;
        let shape = x.shape();
        let [c, h, w] = self.cfg.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] || shape[0] == 0 {
            return Err(shape_err(format!(
                "input {:?} does not match [N, {c}, {h}, {w}]",
                shape
            )));
        }
        let x = match &self.cfg.input_norm {
            Some((mean, std)) => {
                let var: Vec<f64> = std.iter().map(|s| s * s).collect();
                g.fixed_norm(x, mean, &var, 0.0)?
            }
            None => x,
        };
        let mut ctx = Ctx {
            g,
            pv,
            routing,
            mode,
            updates: Vec::new(),
        };
        let out = match &self.plan {
            Plan::Resnet {
                stem,
                blocks,
                final_site,
                head,
            } => {
                let mut s = Streams::One(self.conv(&ctx, stem, x)?);
                for blk in blocks {
                    s = self.block(&mut ctx, blk, s)?;
                }
                let s = self.norm_site(&mut ctx, *final_site, s)?;
                let s = s.map(|v| Ok(g.relu(v)))?;
                let s = s.map(|v| g.global_avg_pool(v))?;
                s.map(|v| self.dense(&ctx, head, v))?
            }
            Plan::Mlp { hidden, head } => {
                let n = shape[0];
                let mut s = Streams::One(g.reshape(x, &[n, self.cfg.input_dim()])?);
                for (k, layer) in hidden.iter().enumerate() {
                    s = s.map(|v| self.dense(&ctx, layer, v))?;
                    s = self.norm_site(&mut ctx, k, s)?;
                    s = s.map(|v| Ok(g.relu(v)))?;
                }
                s.map(|v| self.dense(&ctx, head, v))?
            }
        };
        let logits = match out {
            Streams::One(z) => z,
            Streams::Two(zc, za) => {
                let Routing::Interpolate { gamma, .. } = routing else {
                    unreachable!("streams only split under interpolation")
                };
                g.lerp(zc, za, *gamma)?
            }
        };
        Ok(Forward {
            logits,
            updates: ctx.updates,
        })
    }

    fn check_routing(&self, routing: &Routing, mode: Mode) -> Result<()> {
        let mbn = self.cfg.norm == NormStrategy::Mbn;
        match routing {
            Routing::Unrouted if mbn => Err(arg_err(
                "mixture-BN model called without routing; pick the clean or adv branch or an interpolation",
            )),
            Routing::Interpolate { .. } if !mbn => Err(arg_err(format!(
                "branch interpolation needs a mixture-BN model, this one is {}",
                self.cfg.norm
            ))),
            Routing::Interpolate { .. } if mode == Mode::Train => {
                Err(arg_err("branch interpolation is an inference-time operation"))
            }
            Routing::Interpolate { gamma, mix } => {
                check_gamma(*gamma)?;
                if let MixSet::Layers(set) = mix {
                    if let Some(&bad) = set.iter().find(|&&k| k >= self.sites.len()) {
                        return Err(arg_err(format!(
                            "mix layer {bad} out of range; the model has {} mixture-BN layers",
                            self.sites.len()
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn conv<'g>(&self, ctx: &Ctx<'_, 'g>, c: &Conv, x: Var<'g>) -> Result<Var<'g>> {
        let g = ctx.g;
        let w = ctx.pv.get(c.w);
        match c.gain_bias {
            Some((gain, bias)) => {
                let ws = g.sws(w, self.cfg.sws_gain, self.cfg.sws_eps)?;
                let y = g.conv2d(x, ws, c.stride, c.pad)?;
                g.channel_affine(y, ctx.pv.get(gain), ctx.pv.get(bias))
            }
            None => g.conv2d(x, w, c.stride, c.pad),
        }
    }

    fn dense<'g>(&self, ctx: &Ctx<'_, 'g>, d: &Dense, x: Var<'g>) -> Result<Var<'g>> {
        let g = ctx.g;
        let w = ctx.pv.get(d.w);
        match d.gain {
            Some(gain) => {
                let ws = g.sws(w, self.cfg.sws_gain, self.cfg.sws_eps)?;
                let y = g.linear(x, ws, None)?;
                let bias = ctx.pv.get(d.bias.expect("standardized layers carry a bias"));
                g.channel_affine(y, ctx.pv.get(gain), bias)
            }
            None => g.linear(x, w, d.bias.map(|b| ctx.pv.get(b))),
        }
    }

    fn block<'g>(&self, ctx: &mut Ctx<'_, 'g>, b: &Block, x: Streams<'g>) -> Result<Streams<'g>> {
        let g = ctx.g;
        if self.cfg.norm == NormStrategy::Nf {
            let z = x.map(|v| Ok(g.relu(g.scale(v, b.nf_inv_beta))))?;
            let skip = match &b.shortcut {
                Some(sc) => z.map(|v| self.conv(ctx, sc, v))?,
                None => x,
            };
            let r = z.map(|v| self.conv(ctx, &b.conv1, v))?;
            let r = r.map(|v| Ok(g.relu(v)))?;
            let r = r.map(|v| self.conv(ctx, &b.conv2, v))?;
            let r = r.map(|v| Ok(g.scale(v, self.cfg.nf_alpha)))?;
            return skip.add(g, r);
        }
        let h = self.norm_site(ctx, b.site1, x)?;
        let h = h.map(|v| Ok(g.relu(v)))?;
        let skip = match &b.shortcut {
            Some(sc) => h.map(|v| self.conv(ctx, sc, v))?,
            None => x,
        };
        let r = h.map(|v| self.conv(ctx, &b.conv1, v))?;
        let r = self.norm_site(ctx, b.site2, r)?;
        let r = r.map(|v| Ok(g.relu(v)))?;
        let r = r.map(|v| self.conv(ctx, &b.conv2, v))?;
        skip.add(g, r)
    }

    fn affine<'g>(&self, ctx: &Ctx<'_, 'g>, site: usize, branch: usize, v: Var<'g>) -> Result<Var<'g>> {
        let (s, t) = self.sites[site].affine[branch];
        ctx.g.channel_affine(v, ctx.pv.get(s), ctx.pv.get(t))
    }

    /// Normalization of one branch (0 = clean / plain, 1 = adv) at `site`.
    fn normalize<'g>(&self, ctx: &mut Ctx<'_, 'g>, site: usize, branch: Option<Branch>, v: Var<'g>) -> Result<Var<'g>> {
        let g = ctx.g;
        let eps = self.cfg.bn_eps;
        let normed = match (&self.stats[site], ctx.mode) {
            (SiteStats::None, _) => g.instance_norm(v, eps)?,
            (_, Mode::Train) => {
                let (out, moments) = g.batch_norm(v, eps)?;
                ctx.updates.push(StatUpdate {
                    site,
                    branch,
                    moments,
                });
                out
            }
            (SiteStats::Bn(rs), Mode::Eval) => g.fixed_norm(v, &rs.mean, &rs.var, eps)?,
            (SiteStats::Mbn(st), Mode::Eval) => {
                let rs = st.bank(branch.expect("mixture-BN normalization needs a branch"));
                g.fixed_norm(v, &rs.mean, &rs.var, eps)?
            }
        };
        let idx = match branch {
            Some(Branch::Adv) => 1,
            _ => 0,
        };
        self.affine(ctx, site, idx, normed)
    }

    fn norm_site<'g>(&self, ctx: &mut Ctx<'_, 'g>, site: usize, x: Streams<'g>) -> Result<Streams<'g>> {
        match self.cfg.norm {
            NormStrategy::Nf | NormStrategy::None => Ok(x),
            NormStrategy::Bn | NormStrategy::In => x.map(|v| self.normalize(ctx, site, None, v)),
            NormStrategy::Mbn => match ctx.routing.clone() {
                Routing::Branch(b) => x.map(|v| self.normalize(ctx, site, Some(b), v)),
                Routing::Interpolate { gamma, mix } => {
                    let g = ctx.g;
                    if mix.contains(site) {
                        x.map(|v| {
                            let c = self.normalize(ctx, site, Some(Branch::Clean), v)?;
                            let a = self.normalize(ctx, site, Some(Branch::Adv), v)?;
                            g.lerp(c, a, gamma)
                        })
                    } else {
                        let (fc, fa) = match x {
                            Streams::One(v) => (v, v),
                            Streams::Two(a, b) => (a, b),
                        };
                        Ok(Streams::Two(
                            self.normalize(ctx, site, Some(Branch::Clean), fc)?,
                            self.normalize(ctx, site, Some(Branch::Adv), fa)?,
                        ))
                    }
                }
                Routing::Unrouted => unreachable!("checked in check_routing"),
            },
        }
    }

    /// Applies train-mode statistics updates with the configured momentum.
    pub fn commit(&mut self, updates: &[StatUpdate]) {
        let m = self.cfg.bn_momentum;
        for u in updates {
            match (&mut self.stats[u.site], u.branch) {
                (SiteStats::Bn(rs), _) => rs.ema(&u.moments, m),
                (SiteStats::Mbn(st), Some(b)) => {
                    let mm = st.momentum;
                    st.bank_mut(b).ema(&u.moments, mm)
                }
                _ => {}
            }
        }
    }

    /// Forward pass with frozen parameters. In train mode the running
    /// statistics are updated.
    pub fn forward(&mut self, x: &Tensor, routing: &Routing, mode: Mode) -> Result<Tensor> {
        let g = Graph::new();
        let pv = self.params.bind(&g, false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&g, &pv, xv, routing, mode)?;
        let logits = (*out.logits.value()).clone();
        if mode == Mode::Train {
            self.commit(&out.updates);
        }
        Ok(logits)
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor, routing: &Routing) -> Result<Tensor> {
        let g = Graph::new();
        let pv = self.params.bind(&g, false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&g, &pv, xv, routing, Mode::Eval)?;
        Ok((*out.logits.value()).clone())
    }

    /// Current running statistics at normalization site `layer`.
    pub fn bn_running_stats(&self, layer: usize) -> Result<LayerStats> {
        let pairs = |rs: &RunningStats| rs.mean.iter().copied().zip(rs.var.iter().copied()).collect();
        match self.stats.get(layer) {
            None if self.cfg.norm.has_running_stats() => Err(arg_err(format!(
                "layer {layer} out of range; the model has {} normalization layers",
                self.stats.len()
            ))),
            Some(SiteStats::Bn(rs)) => Ok(LayerStats::Bn(pairs(rs))),
            Some(SiteStats::Mbn(st)) => Ok(LayerStats::Mbn {
                clean: pairs(&st.clean),
                adv: pairs(&st.adv),
            }),
            _ => Err(Error::UnsupportedProbe(format!(
                "{} models keep no running statistics",
                self.cfg.norm
            ))),
        }
    }

    /// Evaluation-time feature interpolation between the two branches.
    pub fn mbn_interpolate_features(&self, x: &Tensor, gamma: f64, mix: MixSet) -> Result<Tensor> {
        self.predict(x, &Routing::Interpolate { gamma, mix })
    }

    /// Restores statistics and parameters from another network of the same
    /// configuration.
    pub(crate) fn replace_state(&mut self, params: ParamStore, stats: Vec<SiteStats>) {
        self.params = params;
        self.stats = stats;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn cfg(norm: NormStrategy) -> ModelConfig {
        ModelConfig {
            depth: 8,
            width: 4,
            num_classes: 3,
            input_shape: [2, 6, 6],
            norm,
            ..ModelConfig::default()
        }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = seeding::rng(seed, &[99]);
        ArrayD::from_shape_fn(IxDyn(&[n, 2, 6, 6]), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn every_strategy_runs_and_has_expected_sites() {
        for norm in [NormStrategy::Bn, NormStrategy::Mbn, NormStrategy::In, NormStrategy::Nf, NormStrategy::None] {
            let mut net = Network::new(cfg(norm), 1).unwrap();
            let x = images(3, 2);
            let r = if norm == NormStrategy::Mbn { Routing::CLEAN } else { Routing::Unrouted };
            let z = net.forward(&x, &r, Mode::Train).unwrap();
            assert_eq!(z.shape(), &[3, 3]);
            assert!(z.iter().all(|v| v.is_finite()));
            assert_eq!(net.num_norm_sites(), 7);
        }
    }

    #[test]
    fn nf_has_no_norm_params_and_standardizes_everything() {
        let net = Network::new(cfg(NormStrategy::Nf), 1).unwrap();
        assert!(net.params().iter().all(|p| p.kind != ParamKind::NormAffine));
        for p in net.params().iter().filter(|p| p.kind == ParamKind::Weight) {
            let stem = p.name.trim_end_matches(".w");
            assert!(net.params().by_name(&format!("{stem}.gain")).is_some(), "{}", p.name);
        }
        assert!(net.site_stats().iter().all(|s| *s == SiteStats::None));
    }

    #[test]
    fn mbn_requires_routing_and_rejects_train_interpolation() {
        let mut net = Network::new(cfg(NormStrategy::Mbn), 1).unwrap();
        let x = images(2, 2);
        assert!(matches!(net.predict(&x, &Routing::Unrouted), Err(Error::InvalidArgument(_))));
        let interp = Routing::Interpolate { gamma: 0.5, mix: MixSet::All };
        assert!(net.forward(&x, &interp, Mode::Train).is_err());
        let bad = Routing::Interpolate {
            gamma: 0.5,
            mix: MixSet::Layers([7].into_iter().collect()),
        };
        assert!(matches!(net.predict(&x, &bad), Err(Error::InvalidArgument(_))));
        let bn = Network::new(cfg(NormStrategy::Bn), 1).unwrap();
        assert!(bn.predict(&x, &interp).is_err());
    }

    #[test]
    fn bn_eval_is_per_sample() {
        let mut net = Network::new(cfg(NormStrategy::Bn), 4).unwrap();
        let x = images(4, 5);
        net.forward(&x, &Routing::Unrouted, Mode::Train).unwrap();
        let both = net.predict(&x.slice_axis(Axis(0), (0..2).into()).to_owned(), &Routing::Unrouted).unwrap();
        let one = net.predict(&x.slice_axis(Axis(0), (0..1).into()).to_owned(), &Routing::Unrouted).unwrap();
        assert_eq!(both.index_axis(Axis(0), 0), one.index_axis(Axis(0), 0));
    }

    #[test]
    fn probe_rejects_nf_and_in() {
        for norm in [NormStrategy::Nf, NormStrategy::In] {
            let net = Network::new(cfg(norm), 1).unwrap();
            assert!(matches!(net.bn_running_stats(3), Err(Error::UnsupportedProbe(_))));
        }
        let net = Network::new(cfg(NormStrategy::Bn), 1).unwrap();
        assert!(net.bn_running_stats(99).is_err());
    }

    #[test]
    fn random_fraction_mix_set() {
        let MixSet::Layers(s) = MixSet::random_fraction(10, 0.3, 4).unwrap() else { panic!() };
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|&k| k < 10));
        assert_eq!(MixSet::random_fraction(10, 0.3, 4).unwrap(), MixSet::Layers(s));
    }
}
