//! The two SEID composite modules — the dense-block layer (SE-Inception-D)
//! and the transition (SE-Inception-T) — plus dense-block orchestration and
//! the convolutional stem.
//!
//! Parameter creation and forward evaluation share the same name prefixes;
//! every conv weight is `{prefix}.w` (bias `{prefix}.b`), every batch-norm
//! `{prefix}.gamma` / `{prefix}.beta` with running stats under `{prefix}`.

use indexmap::IndexMap;

use crate::error::{Result, SeidError};
use crate::init::he_normal;
use crate::layers::{conv_out_size, BatchNormState, BnMode, ConvSpec, PoolSpec};
use crate::params::{BnStore, ParamStore};
use crate::se::{self, SeVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SePlacement {
    BeforeInception,
    AfterInception,
    None,
}

impl SePlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "before" | "before-inception" => Ok(SePlacement::BeforeInception),
            "after" | "after-inception" => Ok(SePlacement::AfterInception),
            "none" => Ok(SePlacement::None),
            other => Err(SeidError::Parse(format!("unknown se_placement '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SePlacement::BeforeInception => "before",
            SePlacement::AfterInception => "after",
            SePlacement::None => "none",
        }
    }
}

/// Composite function applied ahead of each in-block convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composite {
    BnReluConv,
    ReluConv,
}

impl Composite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bn-relu-conv" => Ok(Composite::BnReluConv),
            "relu-conv" => Ok(Composite::ReluConv),
            other => Err(SeidError::Parse(format!("unknown composite '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Composite::BnReluConv => "bn-relu-conv",
            Composite::ReluConv => "relu-conv",
        }
    }

    fn conv_bias(&self) -> bool {
        matches!(self, Composite::ReluConv)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InceptionDConfig {
    pub growth_rate: usize,
    pub se_placement: SePlacement,
    pub reduction: usize,
    pub composite: Composite,
}

#[derive(Debug, Clone, Copy)]
pub struct InceptionTConfig {
    pub in_channels: usize,
    pub se_placement: SePlacement,
    pub reduction: usize,
    pub composite: Composite,
}

impl InceptionTConfig {
    /// Transition output channels: floor(C/2).
    pub fn out_channels(&self) -> usize {
        self.in_channels / 2
    }
}

/// Channel bookkeeping for a dense block.
#[derive(Debug, Clone, Copy)]
pub struct DenseBlockState {
    pub num_layers: usize,
    pub entry_channels: usize,
}

impl DenseBlockState {
    /// Input channels to layer l (0-based): k0 + l*k.
    pub fn input_channels_at(&self, layer: usize, growth_rate: usize) -> usize {
        self.entry_channels + layer * growth_rate
    }

    /// Block output channels: k0 + L*k.
    pub fn output_channels(&self, growth_rate: usize) -> usize {
        self.entry_channels + self.num_layers * growth_rate
    }
}

// ---- parameter creation ----

fn init_conv(params: &mut ParamStore, prefix: &str, spec: ConvSpec, seed: u64) {
    let fan_in = spec.in_channels * spec.kernel * spec.kernel;
    params.insert(
        format!("{prefix}.w"),
        he_normal(&spec.weight_dims(), fan_in, seed, &format!("{prefix}.w")),
    );
    if spec.use_bias {
        params.insert(format!("{prefix}.b"), Tensor::zeros(&[spec.out_channels]));
    }
}

fn init_bn(params: &mut ParamStore, bns: &mut BnStore, prefix: &str, channels: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
    bns.insert(prefix.to_string(), BatchNormState::new(channels));
}

fn init_preact(
    params: &mut ParamStore,
    bns: &mut BnStore,
    prefix: &str,
    channels: usize,
    composite: Composite,
) {
    if composite == Composite::BnReluConv {
        init_bn(params, bns, prefix, channels);
    }
}

pub fn init_se(params: &mut ParamStore, prefix: &str, channels: usize, reduction: usize, seed: u64) {
    let cr = se::bottleneck_width(channels, reduction);
    params.insert(
        format!("{prefix}.w1"),
        he_normal(&[cr, channels], channels, seed, &format!("{prefix}.w1")),
    );
    params.insert(format!("{prefix}.b1"), Tensor::zeros(&[cr]));
    params.insert(
        format!("{prefix}.w2"),
        he_normal(&[channels, cr], cr, seed, &format!("{prefix}.w2")),
    );
    params.insert(format!("{prefix}.b2"), Tensor::zeros(&[channels]));
}

/// Stem: two 3x3 convs at k, maxpool, two 3x3 convs at 2k, maxpool.
pub fn init_stem(params: &mut ParamStore, in_channels: usize, k: usize, seed: u64) {
    let c1 = ConvSpec::new(in_channels, k, 3, 1, 1, true).unwrap();
    let c2 = ConvSpec::new(k, k, 3, 1, 1, true).unwrap();
    let c3 = ConvSpec::new(k, 2 * k, 3, 1, 1, true).unwrap();
    let c4 = ConvSpec::new(2 * k, 2 * k, 3, 1, 1, true).unwrap();
    init_conv(params, "stem.c1", c1, seed);
    init_conv(params, "stem.c2", c2, seed);
    init_conv(params, "stem.c3", c3, seed);
    init_conv(params, "stem.c4", c4, seed);
}

pub fn init_inception_d(
    params: &mut ParamStore,
    bns: &mut BnStore,
    prefix: &str,
    in_channels: usize,
    cfg: &InceptionDConfig,
    seed: u64,
) {
    let k = cfg.growth_rate;
    let bias = cfg.composite.conv_bias();
    match cfg.se_placement {
        SePlacement::BeforeInception => {
            init_se(params, &format!("{prefix}.se"), in_channels, cfg.reduction, seed)
        }
        SePlacement::AfterInception => {
            init_se(params, &format!("{prefix}.se"), 3 * k, cfg.reduction, seed)
        }
        SePlacement::None => {}
    }
    init_preact(params, bns, &format!("{prefix}.in.bn"), in_channels, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.a"),
        ConvSpec::new(in_channels, k, 1, 1, 0, bias).unwrap(),
        seed,
    );
    init_conv(
        params,
        &format!("{prefix}.b.red"),
        ConvSpec::new(in_channels, 4 * k, 1, 1, 0, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.b.bn"), 4 * k, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.b.conv"),
        ConvSpec::new(4 * k, k, 3, 1, 1, bias).unwrap(),
        seed,
    );
    init_conv(
        params,
        &format!("{prefix}.c.red"),
        ConvSpec::new(in_channels, 4 * k, 1, 1, 0, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.c.bn1"), 4 * k, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.c.conv1"),
        ConvSpec::new(4 * k, k, 3, 1, 1, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.c.bn2"), k, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.c.conv2"),
        ConvSpec::new(k, k, 3, 1, 1, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.out.bn"), 3 * k, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.out"),
        ConvSpec::new(3 * k, k, 1, 1, 0, bias).unwrap(),
        seed,
    );
}

pub fn init_dense_block(
    params: &mut ParamStore,
    bns: &mut BnStore,
    prefix: &str,
    entry_channels: usize,
    num_layers: usize,
    cfg: &InceptionDConfig,
    seed: u64,
) {
    let state = DenseBlockState {
        num_layers,
        entry_channels,
    };
    for l in 0..num_layers {
        let cin = state.input_channels_at(l, cfg.growth_rate);
        init_inception_d(params, bns, &format!("{prefix}.layer{l}"), cin, cfg, seed);
    }
}

pub fn init_inception_t(
    params: &mut ParamStore,
    bns: &mut BnStore,
    prefix: &str,
    cfg: &InceptionTConfig,
    seed: u64,
) {
    let c = cfg.in_channels;
    let c2 = cfg.out_channels();
    let bias = cfg.composite.conv_bias();
    if cfg.se_placement != SePlacement::None {
        init_se(params, &format!("{prefix}.se"), c, cfg.reduction, seed);
    }
    init_preact(params, bns, &format!("{prefix}.in.bn"), c, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.a.red"),
        ConvSpec::new(c, c2, 1, 1, 0, bias).unwrap(),
        seed,
    );
    init_conv(
        params,
        &format!("{prefix}.b.red"),
        ConvSpec::new(c, c2, 1, 1, 0, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.b.bn"), c2, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.b.conv"),
        ConvSpec::new(c2, c2, 3, 2, 0, bias).unwrap(),
        seed,
    );
    init_conv(
        params,
        &format!("{prefix}.c.red"),
        ConvSpec::new(c, c2, 1, 1, 0, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.c.bn1"), c2, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.c.conv1"),
        ConvSpec::new(c2, c2, 3, 1, 1, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.c.bn2"), c2, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.c.conv2"),
        ConvSpec::new(c2, c2, 3, 2, 0, bias).unwrap(),
        seed,
    );
    init_preact(params, bns, &format!("{prefix}.out.bn"), 3 * c2, cfg.composite);
    init_conv(
        params,
        &format!("{prefix}.out"),
        ConvSpec::new(3 * c2, c2, 1, 1, 0, bias).unwrap(),
        seed,
    );
}

// ---- forward evaluation ----

/// Everything a block forward needs: the tape, the recorded parameter vars,
/// mutable batch-norm state, and evaluation options.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a IndexMap<String, Var>,
    pub bns: &'a mut BnStore,
    pub mode: BnMode,
    pub gate_override: Option<f64>,
}

impl ForwardCtx<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SeidError::contract(format!("missing parameter var {name}")))
    }

    fn conv(&mut self, x: Var, prefix: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = if spec.use_bias {
            Some(self.var(&format!("{prefix}.b"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, spec)
    }

    /// BN -> ReLU (or plain ReLU) ahead of a convolution.
    fn preact(&mut self, x: Var, bn_prefix: &str, composite: Composite) -> Result<Var> {
        let h = match composite {
            Composite::BnReluConv => {
                let gamma = self.var(&format!("{bn_prefix}.gamma"))?;
                let beta = self.var(&format!("{bn_prefix}.beta"))?;
                let state = self.bns.get_mut(bn_prefix)?;
                self.tape.batch_norm(x, gamma, beta, state, self.mode)?
            }
            Composite::ReluConv => x,
        };
        Ok(self.tape.relu(h))
    }

    fn se(&mut self, x: Var, prefix: &str) -> Result<Var> {
        if let Some(g) = self.gate_override {
            return se::se_forward(self.tape, x, None, Some(g));
        }
        let vars = SeVars {
            w1: self.var(&format!("{prefix}.w1"))?,
            b1: self.var(&format!("{prefix}.b1"))?,
            w2: self.var(&format!("{prefix}.w2"))?,
            b2: self.var(&format!("{prefix}.b2"))?,
        };
        se::se_forward(self.tape, x, Some(&vars), None)
    }
}

/// Stem forward; input spatial S maps to the second maxpool output
/// (S -> (S-3)/2+1 twice), channels in -> k -> 2k.
pub fn stem_forward(ctx: &mut ForwardCtx<'_>, x: Var, in_channels: usize, k: usize) -> Result<Var> {
    let c1 = ConvSpec::new(in_channels, k, 3, 1, 1, true).unwrap();
    let c2 = ConvSpec::new(k, k, 3, 1, 1, true).unwrap();
    let c3 = ConvSpec::new(k, 2 * k, 3, 1, 1, true).unwrap();
    let c4 = ConvSpec::new(2 * k, 2 * k, 3, 1, 1, true).unwrap();
    let h = ctx.conv(x, "stem.c1", c1)?;
    let h = ctx.tape.relu(h);
    let h = ctx.conv(h, "stem.c2", c2)?;
    let h = ctx.tape.relu(h);
    let h = ctx.tape.pool2d(h, PoolSpec::max(3, 2, 0))?;
    let h = ctx.conv(h, "stem.c3", c3)?;
    let h = ctx.tape.relu(h);
    let h = ctx.conv(h, "stem.c4", c4)?;
    let h = ctx.tape.relu(h);
    ctx.tape.pool2d(h, PoolSpec::max(3, 2, 0))
}

/// One dense-block layer: optional SE over the concatenated input, three
/// Inception branches (k maps each), concat, optional SE, 1x1 bottleneck to k.
pub fn inception_d_forward(
    ctx: &mut ForwardCtx<'_>,
    concat_in: Var,
    prefix: &str,
    cfg: &InceptionDConfig,
) -> Result<Var> {
    let cin = ctx.tape.value(concat_in).shape.dims()[1];
    let k = cfg.growth_rate;
    let bias = cfg.composite.conv_bias();
    let x = if cfg.se_placement == SePlacement::BeforeInception {
        ctx.se(concat_in, &format!("{prefix}.se"))?
    } else {
        concat_in
    };
    let h = ctx.preact(x, &format!("{prefix}.in.bn"), cfg.composite)?;

    let a = ctx.conv(h, &format!("{prefix}.a"), ConvSpec::new(cin, k, 1, 1, 0, bias).unwrap())?;

    let b = ctx.conv(
        h,
        &format!("{prefix}.b.red"),
        ConvSpec::new(cin, 4 * k, 1, 1, 0, bias).unwrap(),
    )?;
    let b = ctx.preact(b, &format!("{prefix}.b.bn"), cfg.composite)?;
    let b = ctx.conv(
        b,
        &format!("{prefix}.b.conv"),
        ConvSpec::new(4 * k, k, 3, 1, 1, bias).unwrap(),
    )?;

    let c = ctx.conv(
        h,
        &format!("{prefix}.c.red"),
        ConvSpec::new(cin, 4 * k, 1, 1, 0, bias).unwrap(),
    )?;
    let c = ctx.preact(c, &format!("{prefix}.c.bn1"), cfg.composite)?;
    let c = ctx.conv(
        c,
        &format!("{prefix}.c.conv1"),
        ConvSpec::new(4 * k, k, 3, 1, 1, bias).unwrap(),
    )?;
    let c = ctx.preact(c, &format!("{prefix}.c.bn2"), cfg.composite)?;
    let c = ctx.conv(
        c,
        &format!("{prefix}.c.conv2"),
        ConvSpec::new(k, k, 3, 1, 1, bias).unwrap(),
    )?;

    let cat = ctx.tape.concat(&[a, b, c])?;
    let cat = if cfg.se_placement == SePlacement::AfterInception {
        ctx.se(cat, &format!("{prefix}.se"))?
    } else {
        cat
    };
    let o = ctx.preact(cat, &format!("{prefix}.out.bn"), cfg.composite)?;
    ctx.conv(
        o,
        &format!("{prefix}.out"),
        ConvSpec::new(3 * k, k, 1, 1, 0, bias).unwrap(),
    )
}

/// Dense connectivity: layer l consumes concat(x_0..x_{l-1}); the block
/// returns concat(x_0..x_L) with k0 + L*k channels.
pub fn dense_block_forward(
    ctx: &mut ForwardCtx<'_>,
    x0: Var,
    prefix: &str,
    num_layers: usize,
    cfg: &InceptionDConfig,
) -> Result<Var> {
    let mut features = vec![x0];
    for l in 0..num_layers {
        let cat = ctx.tape.concat(&features)?;
        let y = inception_d_forward(ctx, cat, &format!("{prefix}.layer{l}"), cfg)?;
        features.push(y);
    }
    if features.len() == 1 {
        return Ok(x0);
    }
    ctx.tape.concat(&features)
}

/// Transition: optional SE, per-branch 1x1 bottlenecks to C/2, grid-size
/// reduction (maxpool / strided conv / double conv), concat, 1x1 to C/2.
pub fn inception_t_forward(
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    prefix: &str,
    cfg: &InceptionTConfig,
) -> Result<Var> {
    let dims = ctx.tape.value(x).shape.dims().to_vec();
    if dims[2] < 3 || dims[3] < 3 {
        return Err(SeidError::shape(format!(
            "transition needs spatial extent >= 3, got {}x{}",
            dims[2], dims[3]
        )));
    }
    let c = cfg.in_channels;
    if dims[1] != c {
        return Err(SeidError::shape(format!(
            "transition expects {c} channels, got {}",
            dims[1]
        )));
    }
    let c2 = cfg.out_channels();
    let bias = cfg.composite.conv_bias();
    let x = if cfg.se_placement != SePlacement::None {
        ctx.se(x, &format!("{prefix}.se"))?
    } else {
        x
    };
    let h = ctx.preact(x, &format!("{prefix}.in.bn"), cfg.composite)?;

    let a = ctx.conv(
        h,
        &format!("{prefix}.a.red"),
        ConvSpec::new(c, c2, 1, 1, 0, bias).unwrap(),
    )?;
    let a = ctx.tape.pool2d(a, PoolSpec::max(3, 2, 0))?;

    let b = ctx.conv(
        h,
        &format!("{prefix}.b.red"),
        ConvSpec::new(c, c2, 1, 1, 0, bias).unwrap(),
    )?;
    let b = ctx.preact(b, &format!("{prefix}.b.bn"), cfg.composite)?;
    let b = ctx.conv(
        b,
        &format!("{prefix}.b.conv"),
        ConvSpec::new(c2, c2, 3, 2, 0, bias).unwrap(),
    )?;

    let cc = ctx.conv(
        h,
        &format!("{prefix}.c.red"),
        ConvSpec::new(c, c2, 1, 1, 0, bias).unwrap(),
    )?;
    let cc = ctx.preact(cc, &format!("{prefix}.c.bn1"), cfg.composite)?;
    let cc = ctx.conv(
        cc,
        &format!("{prefix}.c.conv1"),
        ConvSpec::new(c2, c2, 3, 1, 1, bias).unwrap(),
    )?;
    let cc = ctx.preact(cc, &format!("{prefix}.c.bn2"), cfg.composite)?;
    let cc = ctx.conv(
        cc,
        &format!("{prefix}.c.conv2"),
        ConvSpec::new(c2, c2, 3, 2, 0, bias).unwrap(),
    )?;

    let cat = ctx.tape.concat(&[a, b, cc])?;
    let o = ctx.preact(cat, &format!("{prefix}.out.bn"), cfg.composite)?;
    ctx.conv(
        o,
        &format!("{prefix}.out"),
        ConvSpec::new(3 * c2, c2, 1, 1, 0, bias).unwrap(),
    )
}

/// Spatial size after a transition: conv_out_size(h, 3, 2, 0).
pub fn transition_out_size(h: usize) -> Result<usize> {
    conv_out_size(h, 3, 2, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Tensor::from_dims(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn d_cfg(k: usize, r: usize, placement: SePlacement) -> InceptionDConfig {
        InceptionDConfig {
            growth_rate: k,
            se_placement: placement,
            reduction: r,
            composite: Composite::BnReluConv,
        }
    }

    struct Harness {
        params: ParamStore,
        bns: BnStore,
    }

    impl Harness {
        fn forward_d(&mut self, input: &Tensor, cfg: &InceptionDConfig, gate: Option<f64>) -> Tensor {
            let mut tape = Tape::new();
            let mut vars = IndexMap::new();
            for (name, t) in self.params.iter() {
                vars.insert(name.clone(), tape.leaf(t.clone(), false));
            }
            let x = tape.leaf(input.clone(), false);
            let mut ctx = ForwardCtx {
                tape: &mut tape,
                vars: &vars,
                bns: &mut self.bns,
                mode: BnMode::Eval,
                gate_override: gate,
            };
            let y = inception_d_forward(&mut ctx, x, "layer", cfg).unwrap();
            tape.value(y).clone()
        }
    }

    #[test]
    fn inception_d_adds_k_channels() {
        // Cin = k0 + (l-1)k bookkeeping: layer 1 of block 1 with k=4 sees 2k = 8
        let cfg = d_cfg(4, 2, SePlacement::BeforeInception);
        let mut params = ParamStore::new();
        let mut bns = BnStore::new();
        init_inception_d(&mut params, &mut bns, "layer", 8, &cfg, 1);
        let mut h = Harness { params, bns };
        let out = h.forward_d(&random_input(&[2, 8, 6, 6], 2), &cfg, None);
        assert_eq!(out.shape.dims(), &[2, 4, 6, 6]);
    }

    #[test]
    fn placement_none_equals_gates_forced_to_one() {
        let k = 4;
        let cin = 8;
        let cfg_se = d_cfg(k, 2, SePlacement::BeforeInception);
        let cfg_none = d_cfg(k, 2, SePlacement::None);
        let seed = 11;
        let mut p_se = ParamStore::new();
        let mut bn_se = BnStore::new();
        init_inception_d(&mut p_se, &mut bn_se, "layer", cin, &cfg_se, seed);
        let mut p_none = ParamStore::new();
        let mut bn_none = BnStore::new();
        init_inception_d(&mut p_none, &mut bn_none, "layer", cin, &cfg_none, seed);
        // name-keyed init: shared parameters must be identical across variants
        for (name, t) in p_none.iter() {
            assert_eq!(t.data, p_se.get(name).unwrap().data, "param {name}");
        }
        let input = random_input(&[1, cin, 5, 5], 3);
        let mut h_se = Harness { params: p_se, bns: bn_se };
        let mut h_none = Harness { params: p_none, bns: bn_none };
        let out_forced = h_se.forward_d(&input, &cfg_se, Some(1.0));
        let out_none = h_none.forward_d(&input, &cfg_none, None);
        assert_eq!(out_forced.data, out_none.data);
    }

    #[test]
    fn inception_d_grad_check_miniature() {
        let cfg = d_cfg(4, 2, SePlacement::BeforeInception);
        let mut params = ParamStore::new();
        let mut bns = BnStore::new();
        init_inception_d(&mut params, &mut bns, "layer", 8, &cfg, 5);
        let input = random_input(&[1, 8, 6, 6], 9);
        let params = params;
        let report = grad_check(
            |tape, x| {
                let mut vars = IndexMap::new();
                for (name, t) in params.iter() {
                    vars.insert(name.clone(), tape.leaf(t.clone(), false));
                }
                let mut bns = bns.clone();
                let mut ctx = ForwardCtx {
                    tape,
                    vars: &vars,
                    bns: &mut bns,
                    mode: BnMode::Train,
                    gate_override: None,
                };
                let y = inception_d_forward(&mut ctx, x, "layer", &cfg)?;
                Ok(ctx.tape.sum(y))
            },
            &input,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max_rel_error = {}", report.max_rel_error);
    }

    #[test]
    fn dense_block_growth_law() {
        let cfg = d_cfg(3, 2, SePlacement::BeforeInception);
        let k0 = 6;
        let layers = 3;
        let mut params = ParamStore::new();
        let mut bns = BnStore::new();
        init_dense_block(&mut params, &mut bns, "block0", k0, layers, &cfg, 7);
        let mut tape = Tape::new();
        let mut vars = IndexMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone(), false));
        }
        let x0 = tape.leaf(random_input(&[1, k0, 5, 5], 4), false);
        let mut ctx = ForwardCtx {
            tape: &mut tape,
            vars: &vars,
            bns: &mut bns,
            mode: BnMode::Eval,
            gate_override: None,
        };
        let out = dense_block_forward(&mut ctx, x0, "block0", layers, &cfg).unwrap();
        assert_eq!(tape.value(out).shape.dims(), &[1, k0 + layers * 3, 5, 5]);
    }

    #[test]
    fn empty_dense_block_is_identity() {
        let cfg = d_cfg(3, 2, SePlacement::None);
        let mut tape = Tape::new();
        let vars = IndexMap::new();
        let mut bns = BnStore::new();
        let x0 = tape.leaf(random_input(&[1, 4, 5, 5], 4), false);
        let mut ctx = ForwardCtx {
            tape: &mut tape,
            vars: &vars,
            bns: &mut bns,
            mode: BnMode::Eval,
            gate_override: None,
        };
        let out = dense_block_forward(&mut ctx, x0, "block0", 0, &cfg).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn transition_halves_channels_and_spatial() {
        let cfg = InceptionTConfig {
            in_channels: 10,
            se_placement: SePlacement::BeforeInception,
            reduction: 2,
            composite: Composite::BnReluConv,
        };
        let mut params = ParamStore::new();
        let mut bns = BnStore::new();
        init_inception_t(&mut params, &mut bns, "trans0", &cfg, 3);
        let mut tape = Tape::new();
        let mut vars = IndexMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone(), false));
        }
        let x = tape.leaf(random_input(&[2, 10, 7, 7], 8), false);
        let mut ctx = ForwardCtx {
            tape: &mut tape,
            vars: &vars,
            bns: &mut bns,
            mode: BnMode::Eval,
            gate_override: None,
        };
        let out = inception_t_forward(&mut ctx, x, "trans0", &cfg).unwrap();
        assert_eq!(tape.value(out).shape.dims(), &[2, 5, 3, 3]);
    }

    #[test]
    fn transition_rejects_tiny_spatial() {
        let cfg = InceptionTConfig {
            in_channels: 4,
            se_placement: SePlacement::None,
            reduction: 2,
            composite: Composite::ReluConv,
        };
        let mut params = ParamStore::new();
        let mut bns = BnStore::new();
        init_inception_t(&mut params, &mut bns, "trans0", &cfg, 3);
        let mut tape = Tape::new();
        let mut vars = IndexMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone(), false));
        }
        let x = tape.leaf(Tensor::zeros(&[1, 4, 2, 2]), false);
        let mut ctx = ForwardCtx {
            tape: &mut tape,
            vars: &vars,
            bns: &mut bns,
            mode: BnMode::Eval,
            gate_override: None,
        };
        assert!(inception_t_forward(&mut ctx, x, "trans0", &cfg).is_err());
    }

    #[test]
    fn transition_grad_check_miniature() {
        let cfg = InceptionTConfig {
            in_channels: 6,
            se_placement: SePlacement::BeforeInception,
            reduction: 2,
            composite: Composite::BnReluConv,
        };
        let mut params = ParamStore::new();
        let mut bns = BnStore::new();
        init_inception_t(&mut params, &mut bns, "trans0", &cfg, 13);
        let input = random_input(&[1, 6, 5, 5], 17);
        let report = grad_check(
            |tape, x| {
                let mut vars = IndexMap::new();
                for (name, t) in params.iter() {
                    vars.insert(name.clone(), tape.leaf(t.clone(), false));
                }
                let mut bns = bns.clone();
                let mut ctx = ForwardCtx {
                    tape,
                    vars: &vars,
                    bns: &mut bns,
                    mode: BnMode::Train,
                    gate_override: None,
                };
                let y = inception_t_forward(&mut ctx, x, "trans0", &cfg)?;
                Ok(ctx.tape.sum(y))
            },
            &input,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max_rel_error = {}", report.max_rel_error);
    }

    #[test]
    fn stem_output_shape() {
        let mut params = ParamStore::new();
        init_stem(&mut params, 3, 4, 21);
        let mut tape = Tape::new();
        let mut vars = IndexMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone(), false));
        }
        let mut bns = BnStore::new();
        let x = tape.leaf(random_input(&[1, 3, 32, 32], 6), false);
        let mut ctx = ForwardCtx {
            tape: &mut tape,
            vars: &vars,
            bns: &mut bns,
            mode: BnMode::Eval,
            gate_override: None,
        };
        let out = stem_forward(&mut ctx, x, 3, 4).unwrap();
        // 32 -> 15 -> 7, channels 2k = 8
        assert_eq!(tape.value(out).shape.dims(), &[1, 8, 7, 7]);
    }
}
