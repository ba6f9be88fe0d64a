//! Assemble the full SEID network from a declarative config, report its
//! shape/parameter table, and run classification / feature-extraction
//! forwards.

use indexmap::IndexMap;

use crate::blocks::{
    self, Composite, ForwardCtx, InceptionDConfig, InceptionTConfig, SePlacement,
};
use crate::error::{Result, SeidError};
use crate::init::he_normal;
use crate::layers::{conv_out_size, BnMode, PoolSpec};
use crate::params::{BnStore, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub growth_rate: usize,
    pub reduction: usize,
    pub block_layers: Vec<usize>,
    pub se_placement: SePlacement,
    pub num_classes: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub composite: Composite,
    pub seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            growth_rate: 48,
            reduction: 4,
            block_layers: vec![3, 3, 5],
            se_placement: SePlacement::BeforeInception,
            num_classes: 10_575,
            input_size: 128,
            input_channels: 3,
            composite: Composite::BnReluConv,
            seed: 0,
        }
    }
}

impl ArchitectureConfig {
    /// Scaled-down configuration pinned for acceptance runs.
    pub fn desk_preset(seed: u64) -> Self {
        ArchitectureConfig {
            growth_rate: 8,
            reduction: 2,
            block_layers: vec![2, 2, 2],
            se_placement: SePlacement::BeforeInception,
            num_classes: 10,
            input_size: 64,
            input_channels: 3,
            composite: Composite::BnReluConv,
            seed,
        }
    }

    /// Channel counts: stem output (2k), then per block the block output and,
    /// between blocks, the halved transition output.
    pub fn channel_ledger(&self) -> Vec<usize> {
        let k = self.growth_rate;
        let mut ledger = vec![2 * k];
        let mut c = 2 * k;
        for (i, &layers) in self.block_layers.iter().enumerate() {
            c += layers * k;
            ledger.push(c);
            if i + 1 < self.block_layers.len() {
                c /= 2;
                ledger.push(c);
            }
        }
        ledger
    }

    /// Final feature width (channels into the global average pool).
    pub fn feature_width(&self) -> usize {
        *self.channel_ledger().last().unwrap()
    }

    /// Spatial extents: after the stem, then after each transition.
    pub fn spatial_chain(&self) -> Result<Vec<usize>> {
        let mut s = self.input_size;
        // stem pools
        for i in 0..2 {
            if s < 3 {
                return Err(SeidError::config(format!(
                    "input size {} too small: stem maxpool {} has no room",
                    self.input_size,
                    i + 1
                )));
            }
            s = conv_out_size(s, 3, 2, 0)?;
        }
        let mut chain = vec![s];
        for t in 0..self.block_layers.len().saturating_sub(1) {
            if s < 3 {
                return Err(SeidError::config(format!(
                    "input size {} too small: transition {t} sees {s}x{s}",
                    self.input_size
                )));
            }
            s = conv_out_size(s, 3, 2, 0)?;
            chain.push(s);
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layers.is_empty() {
            return Err(SeidError::config("block_layers must be nonempty".to_string()));
        }
        if self.growth_rate == 0 || self.reduction == 0 || self.num_classes == 0 {
            return Err(SeidError::config(
                "growth_rate, reduction and num_classes must be positive".to_string(),
            ));
        }
        self.spatial_chain().map(|_| ())
    }

    fn d_cfg(&self) -> InceptionDConfig {
        InceptionDConfig {
            growth_rate: self.growth_rate,
            se_placement: self.se_placement,
            reduction: self.reduction,
            composite: self.composite,
        }
    }

    // ---- config file grammar: one `key=value` per line, `#` comments ----

    pub fn to_text(&self) -> String {
        let layers: Vec<String> = self.block_layers.iter().map(|l| l.to_string()).collect();
        format!(
            "growth_rate={}\nreduction={}\nblock_layers={}\nse_placement={}\nnum_classes={}\ninput_size={}\ninput_channels={}\ncomposite={}\nseed={}\n",
            self.growth_rate,
            self.reduction,
            layers.join(","),
            self.se_placement.as_str(),
            self.num_classes,
            self.input_size,
            self.input_channels,
            self.composite.as_str(),
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ArchitectureConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SeidError::Parse(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.apply_override(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply a flat `key=value` override. Unknown keys are hard errors.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| SeidError::Parse(format!("invalid integer '{v}' for {key}")))
        };
        match key {
            "growth_rate" => self.growth_rate = parse_usize(value)?,
            "reduction" => self.reduction = parse_usize(value)?,
            "block_layers" => {
                self.block_layers = value
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<usize>().map_err(|_| {
                            SeidError::Parse(format!("invalid block_layers entry '{p}'"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "se_placement" => self.se_placement = SePlacement::parse(value)?,
            "num_classes" => self.num_classes = parse_usize(value)?,
            "input_size" => self.input_size = parse_usize(value)?,
            "input_channels" => self.input_channels = parse_usize(value)?,
            "composite" => self.composite = Composite::parse(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| SeidError::Parse(format!("invalid seed '{value}'")))?;
            }
            other => return Err(SeidError::Parse(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// One row of the shape/parameter report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    /// "kernel, stride, pad" or "-"
    pub filter: String,
    /// "H*W*C" (or the class count for the softmax row)
    pub output: String,
    pub param_count: usize,
}

/// Immutable built network: config, parameter store and batch-norm state.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ArchitectureConfig,
    pub params: ParamStore,
    pub bns: BnStore,
}

/// Result of one recorded forward pass.
pub struct ForwardOutput {
    pub tape: Tape,
    pub logits: Var,
    pub features: Var,
    pub param_vars: IndexMap<String, Var>,
}

pub fn build_model(cfg: &ArchitectureConfig) -> Result<Model> {
    cfg.validate()?;
    let k = cfg.growth_rate;
    let seed = cfg.seed;
    let mut params = ParamStore::new();
    let mut bns = BnStore::new();
    blocks::init_stem(&mut params, cfg.input_channels, k, seed);
    let d_cfg = cfg.d_cfg();
    let mut channels = 2 * k;
    for (i, &layers) in cfg.block_layers.iter().enumerate() {
        blocks::init_dense_block(
            &mut params,
            &mut bns,
            &format!("block{i}"),
            channels,
            layers,
            &d_cfg,
            seed,
        );
        channels += layers * k;
        if i + 1 < cfg.block_layers.len() {
            let t_cfg = InceptionTConfig {
                in_channels: channels,
                se_placement: cfg.se_placement,
                reduction: cfg.reduction,
                composite: cfg.composite,
            };
            blocks::init_inception_t(&mut params, &mut bns, &format!("trans{i}"), &t_cfg, seed);
            channels = t_cfg.out_channels();
        }
    }
    // head: final pre-activation, global average pool, classifier
    if cfg.composite == Composite::BnReluConv {
        params.insert("head.bn.gamma", Tensor::ones(&[channels]));
        params.insert("head.bn.beta", Tensor::zeros(&[channels]));
        bns.insert("head.bn", crate::layers::BatchNormState::new(channels));
    }
    params.insert(
        "head.fc.w",
        he_normal(&[channels, cfg.num_classes], channels, seed, "head.fc.w"),
    );
    params.insert("head.fc.b", Tensor::zeros(&[cfg.num_classes]));
    Ok(Model {
        cfg: cfg.clone(),
        params,
        bns,
    })
}

impl Model {
    /// Record a full forward pass on a fresh tape.
    ///
    /// `with_grad` marks parameters as differentiable; `mode` selects batch
    /// statistics (Train also updates the running stats in `bns`).
    pub fn forward_recorded(
        params: &ParamStore,
        bns: &mut BnStore,
        cfg: &ArchitectureConfig,
        batch: &Tensor,
        mode: BnMode,
        with_grad: bool,
        gate_override: Option<f64>,
    ) -> Result<ForwardOutput> {
        let dims = batch.shape.dims();
        if dims.len() != 4 || dims[1] != cfg.input_channels || dims[2] != cfg.input_size || dims[3] != cfg.input_size
        {
            return Err(SeidError::shape(format!(
                "batch shape {} does not match configured input {}x{}x{}",
                batch.shape, cfg.input_channels, cfg.input_size, cfg.input_size
            )));
        }
        let mut tape = Tape::new();
        let mut param_vars = IndexMap::new();
        for (name, t) in params.iter() {
            param_vars.insert(name.clone(), tape.leaf(t.clone(), with_grad));
        }
        let x = tape.leaf(batch.clone(), false);
        let d_cfg = cfg.d_cfg();
        let mut ctx = ForwardCtx {
            tape: &mut tape,
            vars: &param_vars,
            bns,
            mode,
            gate_override,
        };
        let mut h = blocks::stem_forward(&mut ctx, x, cfg.input_channels, cfg.growth_rate)?;
        let mut channels = 2 * cfg.growth_rate;
        for (i, &layers) in cfg.block_layers.iter().enumerate() {
            h = blocks::dense_block_forward(&mut ctx, h, &format!("block{i}"), layers, &d_cfg)?;
            channels += layers * cfg.growth_rate;
            if i + 1 < cfg.block_layers.len() {
                let t_cfg = InceptionTConfig {
                    in_channels: channels,
                    se_placement: cfg.se_placement,
                    reduction: cfg.reduction,
                    composite: cfg.composite,
                };
                h = blocks::inception_t_forward(&mut ctx, h, &format!("trans{i}"), &t_cfg)?;
                channels = t_cfg.out_channels();
            }
        }
        let h = match cfg.composite {
            Composite::BnReluConv => {
                let gamma = ctx.var("head.bn.gamma")?;
                let beta = ctx.var("head.bn.beta")?;
                let state = ctx.bns.get_mut("head.bn")?;
                let hb = ctx.tape.batch_norm(h, gamma, beta, state, mode)?;
                ctx.tape.relu(hb)
            }
            Composite::ReluConv => ctx.tape.relu(h),
        };
        let pooled = ctx.tape.pool2d(h, PoolSpec::global_average())?;
        let n = dims[0];
        let features = ctx.tape.reshape(pooled, &[n, channels])?;
        let fc_w = ctx.var("head.fc.w")?;
        let fc_b = ctx.var("head.fc.b")?;
        let logits = ctx.tape.matmul(features, fc_w)?;
        let logits = ctx.tape.add(logits, fc_b)?;
        Ok(ForwardOutput {
            tape,
            logits,
            features,
            param_vars,
        })
    }

    /// Eval-mode forward (running batch-norm statistics, no recording of
    /// gradients). Pure: does not mutate the model.
    pub fn forward_eval(&self, batch: &Tensor, gate_override: Option<f64>) -> Result<ForwardOutput> {
        let mut bns = self.bns.clone();
        Model::forward_recorded(
            &self.params,
            &mut bns,
            &self.cfg,
            batch,
            BnMode::Eval,
            false,
            gate_override,
        )
    }

    /// Train-mode forward with gradients; updates running batch-norm stats.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<ForwardOutput> {
        Model::forward_recorded(
            &self.params,
            &mut self.bns,
            &self.cfg,
            batch,
            BnMode::Train,
            true,
            None,
        )
    }

    /// Softmax class probabilities per sample.
    pub fn classify_forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut out = self.forward_eval(batch, None)?;
        let probs = out.tape.softmax(out.logits)?;
        Ok(out.tape.value(probs).clone())
    }

    /// Penultimate (pre-classifier) global-average-pool features, N x D.
    pub fn extract_features(&self, batch: &Tensor) -> Result<Tensor> {
        let out = self.forward_eval(batch, None)?;
        Ok(out.tape.value(out.features).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Shape/parameter table mirroring the architecture schedule.
    pub fn describe(&self) -> Vec<LayerSummary> {
        let cfg = &self.cfg;
        let k = cfg.growth_rate;
        let mut rows = Vec::new();
        let s0 = cfg.input_size;
        let conv_row = |name: &str, out_s: usize, c: usize, params: usize| LayerSummary {
            name: name.to_string(),
            filter: "3, 1, 1".to_string(),
            output: format!("{out_s}*{out_s}*{c}"),
            param_count: params,
        };
        rows.push(conv_row("Conv", s0, k, self.params.param_count_prefixed("stem.c1")));
        rows.push(conv_row("Conv", s0, k, self.params.param_count_prefixed("stem.c2")));
        let s1 = conv_out_size(s0, 3, 2, 0).expect("validated");
        rows.push(LayerSummary {
            name: "Maxpooling".to_string(),
            filter: "3, 2, 0".to_string(),
            output: format!("{s1}*{s1}*{k}"),
            param_count: 0,
        });
        rows.push(conv_row("Conv", s1, 2 * k, self.params.param_count_prefixed("stem.c3")));
        rows.push(conv_row("Conv", s1, 2 * k, self.params.param_count_prefixed("stem.c4")));
        let s2 = conv_out_size(s1, 3, 2, 0).expect("validated");
        rows.push(LayerSummary {
            name: "Maxpooling".to_string(),
            filter: "3, 2, 0".to_string(),
            output: format!("{s2}*{s2}*{}", 2 * k),
            param_count: 0,
        });
        let mut s = s2;
        let mut channels = 2 * k;
        for (i, &layers) in cfg.block_layers.iter().enumerate() {
            channels += layers * k;
            rows.push(LayerSummary {
                name: format!("{layers}*SE-Inception-D"),
                filter: "-".to_string(),
                output: format!("{s}*{s}*{channels}"),
                param_count: self.params.param_count_prefixed(&format!("block{i}.")),
            });
            if i + 1 < cfg.block_layers.len() {
                channels /= 2;
                s = conv_out_size(s, 3, 2, 0).expect("validated");
                rows.push(LayerSummary {
                    name: "SE-Inception-T".to_string(),
                    filter: "-".to_string(),
                    output: format!("{s}*{s}*{channels}"),
                    param_count: self.params.param_count_prefixed(&format!("trans{i}.")),
                });
            }
        }
        rows.push(LayerSummary {
            name: "Average Pooling".to_string(),
            filter: format!("{s}, 1, 0"),
            output: format!("1*1*{channels}"),
            param_count: self.params.param_count_prefixed("head.bn"),
        });
        rows.push(LayerSummary {
            name: "Softmax".to_string(),
            filter: "-".to_string(),
            output: format!("{}", cfg.num_classes),
            param_count: self.params.param_count_prefixed("head.fc"),
        });
        rows
    }
}

/// Expected output-size column for the published schedule ([3,3,5], input
/// 128) with growth rate k substituted. Requires 4 | k so the fractional
/// channel multiples (2.5k, 2.75k, 7.75k) are exact.
pub fn table1_expected_outputs(k: usize) -> Result<Vec<String>> {
    if k % 4 != 0 {
        return Err(SeidError::contract(format!(
            "table-1 template needs 4 | k, got {k}"
        )));
    }
    Ok(vec![
        format!("128*128*{k}"),
        format!("128*128*{k}"),
        format!("63*63*{k}"),
        format!("63*63*{}", 2 * k),
        format!("63*63*{}", 2 * k),
        format!("31*31*{}", 2 * k),
        format!("31*31*{}", 5 * k),
        format!("15*15*{}", 5 * k / 2),
        format!("15*15*{}", 11 * k / 2),
        format!("7*7*{}", 11 * k / 4),
        format!("7*7*{}", 31 * k / 4),
        format!("1*1*{}", 31 * k / 4),
        "10575".to_string(),
    ])
}

/// Compare a model's describe() output-size column against the Table-1
/// template; returns the mismatching rows, empty when conformant.
pub fn check_table1(model: &Model) -> Result<Vec<(String, String)>> {
    let cfg = &model.cfg;
    if cfg.block_layers != [3, 3, 5] || cfg.input_size != 128 || cfg.num_classes != 10_575 {
        return Err(SeidError::contract(
            "table-1 check requires block_layers=3,3,5, input_size=128, num_classes=10575"
                .to_string(),
        ));
    }
    let expected = table1_expected_outputs(cfg.growth_rate)?;
    let rows = model.describe();
    if rows.len() != expected.len() {
        return Err(SeidError::contract(format!(
            "describe produced {} rows, template has {}",
            rows.len(),
            expected.len()
        )));
    }
    Ok(rows
        .iter()
        .zip(expected)
        .filter(|(row, exp)| &row.output != exp)
        .map(|(row, exp)| (row.output.clone(), exp))
        .collect())
}
