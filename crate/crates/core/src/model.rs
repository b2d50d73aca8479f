//! Segmentation network construction.
//!
//! All four architectures share one skeleton: an encoder of mirrored blocks
//! with 2x2 max pooling between them, a decoder that upsamples back to the
//! input resolution, optional encoder-to-decoder skip concatenations at
//! matching resolutions, and a final 1x1 conv producing per-pixel class
//! logits. EncDec and UNet blocks are plain CBR stacks (conv, batch norm,
//! relu); the DenseNet variants use densely concatenated CBR layers behind a
//! small CBR stem, with a 1x1 transition conv at every dense block exit.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{BnMode, BnRunning, Graph, Padding, Tensor, Var};
use crate::{Error, Result};

/// Networks consume single-channel images.
pub const IN_CHANNELS: usize = 1;

const MICRO_LAYERS: [usize; 10] = [2, 2, 3, 3, 4, 4, 3, 3, 2, 2];
const MICRO_FILTERS: [usize; 10] = [8, 16, 32, 64, 64, 64, 64, 32, 16, 8];
const MICRO_GROWTH_DENSE1: usize = 4;
const MICRO_GROWTH_DENSE2: usize = 6;
const MICRO_STEM: usize = 4;

const FULL_LAYERS: [usize; 10] = [6, 8, 11, 15, 20, 20, 15, 11, 8, 6];
const FULL_FILTERS: [usize; 10] = [32, 64, 128, 256, 512, 512, 256, 128, 64, 32];
const FULL_GROWTH_DENSE1: usize = 16;
const FULL_GROWTH_DENSE2: usize = 24;
const FULL_STEM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    EncDec,
    UNet,
    DenseNet1,
    DenseNet2,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::EncDec, Arch::UNet, Arch::DenseNet1, Arch::DenseNet2];

    pub fn name(self) -> &'static str {
        match self {
            Arch::EncDec => "encdec",
            Arch::UNet => "unet",
            Arch::DenseNet1 => "densenet1",
            Arch::DenseNet2 => "densenet2",
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(self, Arch::DenseNet1 | Arch::DenseNet2)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "encdec" => Ok(Arch::EncDec),
            "unet" => Ok(Arch::UNet),
            "densenet1" => Ok(Arch::DenseNet1),
            "densenet2" => Ok(Arch::DenseNet2),
            other => Err(Error::InvalidModelSpec(format!(
                "unknown architecture {other:?}, expected encdec|unet|densenet1|densenet2"
            ))),
        }
    }
}

/// Preset sizing. Micro trains on CPU in minutes; Full carries the
/// published multi-million-parameter block tables and is constructible
/// but far too heavy to train here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Micro,
    Full,
}

/// One block: a layer count and, per layer, either the filter count
/// (EncDec/UNet) or the growth rate (dense variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct BlockSpec {
    pub layers: usize,
    pub filters_or_growth: usize,
}

impl From<(usize, usize)> for BlockSpec {
    fn from((layers, filters_or_growth): (usize, usize)) -> Self {
        BlockSpec {
            layers,
            filters_or_growth,
        }
    }
}

impl From<BlockSpec> for (usize, usize) {
    fn from(b: BlockSpec) -> Self {
        (b.layers, b.filters_or_growth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub blocks: Vec<BlockSpec>,
    pub growth_rate: usize,
    pub compression: usize,
    pub skip_connections: bool,
    pub num_classes: usize,
    pub scale: Scale,
}

impl ModelSpec {
    pub fn micro(arch: Arch, num_classes: usize) -> ModelSpec {
        Self::preset(arch, num_classes, Scale::Micro)
    }

    pub fn full(arch: Arch, num_classes: usize) -> ModelSpec {
        Self::preset(arch, num_classes, Scale::Full)
    }

    fn preset(arch: Arch, num_classes: usize, scale: Scale) -> ModelSpec {
        let (layers, filters): (&[usize], &[usize]) = match scale {
            Scale::Micro => (&MICRO_LAYERS, &MICRO_FILTERS),
            Scale::Full => (&FULL_LAYERS, &FULL_FILTERS),
        };
        let growth_rate = match (arch, scale) {
            (Arch::DenseNet1, Scale::Micro) => MICRO_GROWTH_DENSE1,
            (Arch::DenseNet2, Scale::Micro) => MICRO_GROWTH_DENSE2,
            (Arch::DenseNet1, Scale::Full) => FULL_GROWTH_DENSE1,
            (Arch::DenseNet2, Scale::Full) => FULL_GROWTH_DENSE2,
            _ => 0,
        };
        let blocks = layers
            .iter()
            .zip(filters)
            .map(|(&l, &f)| BlockSpec {
                layers: l,
                filters_or_growth: if arch.is_dense() { growth_rate } else { f },
            })
            .collect();
        ModelSpec {
            arch,
            blocks,
            growth_rate,
            compression: if arch == Arch::DenseNet2 { 2 } else { 1 },
            skip_connections: arch != Arch::EncDec,
            num_classes,
            scale,
        }
    }

    /// Stem width for the dense variants, fixed per scale so that every 1x1
    /// compression input stays divisible along the whole block chain.
    fn stem_width(&self) -> usize {
        match self.scale {
            Scale::Micro => MICRO_STEM,
            Scale::Full => FULL_STEM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidModelSpec(msg));
        if self.blocks.is_empty() || self.blocks.len() % 2 != 0 {
            return err(format!(
                "block list must be non-empty with mirror-symmetric (even) length, got {}",
                self.blocks.len()
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.layers == 0 || b.filters_or_growth == 0 {
                return err(format!(
                    "block {} must have positive layer and filter counts, got ({}, {})",
                    i + 1,
                    b.layers,
                    b.filters_or_growth
                ));
            }
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        if self.compression == 0 {
            return err("compression must be >= 1".into());
        }
        if self.arch.is_dense() {
            if self.growth_rate == 0 {
                return err("dense variants need a positive growth_rate".into());
            }
            if let Some(b) = self
                .blocks
                .iter()
                .find(|b| b.filters_or_growth != self.growth_rate)
            {
                return err(format!(
                    "dense block growth {} disagrees with growth_rate {}",
                    b.filters_or_growth, self.growth_rate
                ));
            }
            let want = if self.arch == Arch::DenseNet2 { 2 } else { 1 };
            if self.compression != want {
                return err(format!(
                    "{} uses compression {}, got {}",
                    self.arch, want, self.compression
                ));
            }
        } else {
            if self.growth_rate != 0 {
                return err(format!(
                    "{} ignores growth_rate, set it to 0 (got {})",
                    self.arch, self.growth_rate
                ));
            }
            if self.compression != 1 {
                return err(format!(
                    "{} ignores compression, set it to 1 (got {})",
                    self.arch, self.compression
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockConfig {
    /// L: CBR layers inside the block.
    pub num_layers: usize,
    /// K_in1: channels entering the first layer.
    pub in_channels: usize,
    /// K_out: channels each layer emits.
    pub out_per_layer: usize,
}

impl DenseBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.in_channels == 0 || self.out_per_layer == 0 {
            return Err(Error::InvalidModelSpec(format!(
                "dense block needs positive layers/in/out, got L={} K_in1={} K_out={}",
                self.num_layers, self.in_channels, self.out_per_layer
            )));
        }
        Ok(())
    }

    /// Channels of the full concatenation leaving the block.
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.out_per_layer
    }
}

/// Per-layer input channel counts: layer l >= 1 consumes the concatenation of
/// the block input and all previous layer outputs, so its width is
/// (l-1)*K_out + K_in1.
pub fn dense_block_channels(cfg: &DenseBlockConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    Ok((0..cfg.num_layers)
        .map(|l| cfg.in_channels + l * cfg.out_per_layer)
        .collect())
}

/// Graph handles for one conv + batch norm + relu unit.
#[derive(Debug, Clone, Copy)]
pub struct CbrVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub shift: Var,
}

pub fn cbr(
    g: &mut Graph,
    x: Var,
    vars: CbrVars,
    running: &mut BnRunning,
    mode: BnMode,
) -> Result<Var> {
    let conv = g.conv2d(x, vars.weight, vars.bias, Padding::Same)?;
    let norm = g.batch_norm(conv, vars.gamma, vars.shift, mode, running)?;
    Ok(g.relu(norm))
}

/// Runs a dense block: layer l sees the concatenation of the block input and
/// every previous layer output, and the block returns the final concatenation
/// (in_channels + L*out_per_layer channels). The first layer consumes the raw
/// input, so a single-layer block applies exactly one CBR.
pub fn dense_block_forward(
    g: &mut Graph,
    input: Var,
    layers: &[CbrVars],
    running: &mut [BnRunning],
    mode: BnMode,
    cfg: &DenseBlockConfig,
) -> Result<Var> {
    cfg.validate()?;
    if layers.len() != cfg.num_layers || running.len() != cfg.num_layers {
        return Err(Error::ShapeMismatch {
            op: "dense_block",
            detail: format!(
                "{} layer vars / {} running stats for L={}",
                layers.len(),
                running.len(),
                cfg.num_layers
            ),
        });
    }
    let expected = dense_block_channels(cfg)?;
    let mut acc = input;
    for (l, (vars, stats)) in layers.iter().zip(running.iter_mut()).enumerate() {
        let got = g.shape(acc)[1];
        if got != expected[l] {
            return Err(Error::ShapeMismatch {
                op: "dense_block",
                detail: format!("layer {} expected {} input channels, got {got}", l + 1, expected[l]),
            });
        }
        let out = cbr(g, acc, *vars, stats, mode)?;
        acc = g.concat_channels(acc, out)?;
    }
    Ok(acc)
}

/// 1x1 conv mapping C_in channels to C_in / compression channels. With
/// compression 1 the conv is still applied.
pub fn compress_channels(
    g: &mut Graph,
    input: Var,
    weight: Var,
    bias: Var,
    compression: usize,
) -> Result<Var> {
    let cin = match g.shape(input) {
        [_, c, _, _] => *c,
        other => {
            return Err(Error::ShapeMismatch {
                op: "compress_channels",
                detail: format!("expected 4-d input, got {other:?}"),
            })
        }
    };
    if compression == 0 || cin % compression != 0 {
        return Err(Error::CompressionIndivisible {
            channels: cin,
            factor: compression,
        });
    }
    let want = [cin / compression, cin, 1, 1];
    if g.shape(weight) != want {
        return Err(Error::ShapeMismatch {
            op: "compress_channels",
            detail: format!("weight {:?} does not match {want:?}", g.shape(weight)),
        });
    }
    g.conv2d(input, weight, bias, Padding::Same)
}

#[derive(Debug, Clone, Copy)]
enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    Gamma,
    Shift,
}

/// One named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    kind: ParamKind,
}

impl ParamDef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct CbrIds {
    weight: usize,
    bias: usize,
    gamma: usize,
    shift: usize,
    bn: usize,
}

#[derive(Debug, Clone)]
enum PlanOp {
    Cbr(CbrIds),
    DenseBlock {
        layers: Vec<CbrIds>,
        cfg: DenseBlockConfig,
    },
    Transition {
        weight: usize,
        bias: usize,
        compression: usize,
    },
    MaxPool,
    UpsampleConv {
        weight: usize,
        bias: usize,
    },
    SaveSkip(usize),
    ConcatSkip(usize),
    FinalConv {
        weight: usize,
        bias: usize,
    },
}

#[derive(Default)]
struct NetBuilder {
    defs: Vec<ParamDef>,
    plan: Vec<PlanOp>,
    total: usize,
    bn_channels: Vec<usize>,
}

impl NetBuilder {
    fn def(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        let len: usize = shape.iter().product();
        let def = ParamDef {
            name,
            shape,
            offset: self.total,
            kind,
        };
        self.total += len;
        self.defs.push(def);
        self.defs.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> (usize, usize) {
        let fan_in = cin * k * k;
        let w = self.def(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            ParamKind::ConvWeight { fan_in },
        );
        let b = self.def(format!("{name}.bias"), vec![cout], ParamKind::Bias);
        (w, b)
    }

    fn cbr(&mut self, name: &str, cin: usize, cout: usize) -> CbrIds {
        let (weight, bias) = self.conv(&format!("{name}.conv"), cout, cin, 3);
        let gamma = self.def(format!("{name}.bn.gamma"), vec![cout], ParamKind::Gamma);
        let shift = self.def(format!("{name}.bn.shift"), vec![cout], ParamKind::Shift);
        let bn = self.bn_channels.len();
        self.bn_channels.push(cout);
        CbrIds {
            weight,
            bias,
            gamma,
            shift,
            bn,
        }
    }

    fn block(&mut self, spec: &ModelSpec, name: &str, cin: usize, bs: BlockSpec) -> Result<usize> {
        if spec.arch.is_dense() {
            let cfg = DenseBlockConfig {
                num_layers: bs.layers,
                in_channels: cin,
                out_per_layer: spec.growth_rate,
            };
            let widths = dense_block_channels(&cfg)?;
            let layers = widths
                .iter()
                .enumerate()
                .map(|(l, &w)| self.cbr(&format!("{name}.l{l}"), w, spec.growth_rate))
                .collect();
            self.plan.push(PlanOp::DenseBlock { layers, cfg });
            let full = cfg.out_channels();
            if full % spec.compression != 0 {
                return Err(Error::CompressionIndivisible {
                    channels: full,
                    factor: spec.compression,
                });
            }
            let out = full / spec.compression;
            let (weight, bias) = self.conv(&format!("{name}.transition"), out, full, 1);
            self.plan.push(PlanOp::Transition {
                weight,
                bias,
                compression: spec.compression,
            });
            Ok(out)
        } else {
            let mut c = cin;
            for l in 0..bs.layers {
                let ids = self.cbr(&format!("{name}.l{l}"), c, bs.filters_or_growth);
                self.plan.push(PlanOp::Cbr(ids));
                c = bs.filters_or_growth;
            }
            Ok(c)
        }
    }
}

/// Output of one forward pass: the logits and, in creation order, one graph
/// var per parameter tensor for gradient gathering.
pub struct ForwardPass {
    pub logits: Var,
    param_vars: Vec<Var>,
}

#[derive(Debug)]
pub struct Network {
    spec: ModelSpec,
    defs: Vec<ParamDef>,
    params: Vec<f64>,
    plan: Vec<PlanOp>,
    bn_running: Vec<BnRunning>,
}

impl Network {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut b = NetBuilder::default();
        let half = spec.blocks.len() / 2;
        let mut cur = IN_CHANNELS;

        if spec.arch.is_dense() {
            let ids = b.cbr("stem", cur, spec.stem_width());
            b.plan.push(PlanOp::Cbr(ids));
            cur = spec.stem_width();
        }

        let mut enc_out = Vec::with_capacity(half);
        for bi in 0..half {
            cur = b.block(spec, &format!("enc{}", bi + 1), cur, spec.blocks[bi])?;
            enc_out.push(cur);
            if bi + 1 < half {
                if spec.skip_connections {
                    b.plan.push(PlanOp::SaveSkip(bi));
                }
                b.plan.push(PlanOp::MaxPool);
            }
        }
        for bi in half..spec.blocks.len() {
            let d = bi - half;
            if d > 0 {
                let mirror = enc_out[half - 1 - d];
                let (weight, bias) = b.conv(&format!("up{}.conv", bi + 1), mirror, cur, 3);
                b.plan.push(PlanOp::UpsampleConv { weight, bias });
                cur = mirror;
                if spec.skip_connections {
                    b.plan.push(PlanOp::ConcatSkip(half - 1 - d));
                    cur += mirror;
                }
            }
            cur = b.block(spec, &format!("dec{}", bi + 1), cur, spec.blocks[bi])?;
        }
        let (weight, bias) = b.conv("final", spec.num_classes, cur, 1);
        b.plan.push(PlanOp::FinalConv { weight, bias });

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; b.total];
        for def in &b.defs {
            let slot = &mut params[def.offset..def.offset + def.len()];
            match def.kind {
                ParamKind::ConvWeight { fan_in } => {
                    let limit = (6.0 / fan_in as f64).sqrt();
                    for v in slot {
                        *v = rng.random_range(-limit..limit);
                    }
                }
                ParamKind::Gamma => slot.fill(1.0),
                ParamKind::Bias | ParamKind::Shift => {}
            }
        }
        let bn_running = b.bn_channels.iter().map(|&c| BnRunning::new(c)).collect();

        Ok(Network {
            spec: spec.clone(),
            defs: b.defs,
            params,
            plan: b.plan,
            bn_running,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn bn_stats(&self) -> &[BnRunning] {
        &self.bn_running
    }

    /// Forward pass. Train mode folds batch statistics into the network's
    /// running batch-norm stats, so it needs exclusive access.
    pub fn forward(&mut self, g: &mut Graph, batch: &Tensor, mode: BnMode) -> Result<ForwardPass> {
        let Network {
            spec,
            defs,
            params,
            plan,
            bn_running,
        } = self;
        run_plan(spec, defs, params, plan, bn_running, g, batch, mode)
    }

    /// Read-only eval-mode forward; running stats are untouched.
    pub fn infer(&self, g: &mut Graph, batch: &Tensor) -> Result<ForwardPass> {
        let mut running = self.bn_running.clone();
        run_plan(
            &self.spec,
            &self.defs,
            &self.params,
            &self.plan,
            &mut running,
            g,
            batch,
            BnMode::Eval,
        )
    }

    /// Gathers parameter gradients after `g.backward` into one flat vector
    /// aligned with `params()`. Parameters without a recorded gradient (none,
    /// once a loss touches the logits) contribute zeros.
    pub fn flat_grad(&self, g: &Graph, pass: &ForwardPass) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.params.len()];
        for (def, &var) in self.defs.iter().zip(&pass.param_vars) {
            if let Some(grad) = g.grad(var) {
                if grad.len() != def.len() {
                    return Err(Error::ShapeMismatch {
                        op: "flat_grad",
                        detail: format!(
                            "gradient of {} has {} values, expected {}",
                            def.name,
                            grad.len(),
                            def.len()
                        ),
                    });
                }
                out[def.offset..def.offset + def.len()].copy_from_slice(grad);
            }
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tensors = dir.join("tensors");
        let bn_dir = dir.join("bn");
        fs::create_dir_all(&tensors).map_err(|e| Error::io("create checkpoint dir", e))?;
        fs::create_dir_all(&bn_dir).map_err(|e| Error::io("create checkpoint dir", e))?;

        let mut manifest = Manifest {
            model: self.spec.clone(),
            params: Vec::with_capacity(self.defs.len()),
            bn: Vec::with_capacity(self.bn_running.len()),
        };
        for (i, def) in self.defs.iter().enumerate() {
            let file = format!("tensors/p{i:04}.tnsr");
            let t = Tensor::new(
                def.shape.clone(),
                self.params[def.offset..def.offset + def.len()].to_vec(),
            )?;
            t.save(&dir.join(&file))?;
            manifest.params.push(ManifestParam {
                name: def.name.clone(),
                shape: def.shape.clone(),
                file,
            });
        }
        for (i, stats) in self.bn_running.iter().enumerate() {
            let file = format!("bn/b{i:04}.tnsr");
            let c = stats.mean.len();
            let mut data = Vec::with_capacity(2 * c);
            data.extend_from_slice(&stats.mean);
            data.extend_from_slice(&stats.var);
            Tensor::new(vec![2, c], data)?.save(&dir.join(&file))?;
            manifest.bn.push(ManifestBn {
                index: i,
                channels: c,
                file,
            });
        }
        let text = toml::to_string(&manifest).map_err(|e| Error::CheckpointFormat {
            path: dir.join("manifest.toml"),
            detail: format!("manifest serialization failed: {e}"),
        })?;
        fs::write(dir.join("manifest.toml"), text)
            .map_err(|e| Error::io("write checkpoint manifest", e))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Network> {
        let manifest_path = dir.join("manifest.toml");
        let bad = |detail: String| Error::CheckpointFormat {
            path: manifest_path.clone(),
            detail,
        };
        let text =
            fs::read_to_string(&manifest_path).map_err(|e| Error::io("read checkpoint manifest", e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;

        let mut net = Network::build(&manifest.model, 0)?;
        if manifest.params.len() != net.defs.len() {
            return Err(bad(format!(
                "manifest lists {} parameter tensors, model has {}",
                manifest.params.len(),
                net.defs.len()
            )));
        }
        for (entry, def) in manifest.params.iter().zip(&net.defs) {
            if entry.name != def.name || entry.shape != def.shape {
                return Err(bad(format!(
                    "manifest entry {} {:?} does not match model parameter {} {:?}",
                    entry.name, entry.shape, def.name, def.shape
                )));
            }
            let t = Tensor::load(&dir.join(&entry.file))?;
            if t.shape() != def.shape.as_slice() {
                return Err(Error::CheckpointFormat {
                    path: dir.join(&entry.file),
                    detail: format!("tensor shape {:?}, manifest says {:?}", t.shape(), def.shape),
                });
            }
            net.params[def.offset..def.offset + def.len()].copy_from_slice(t.data());
        }
        if manifest.bn.len() != net.bn_running.len() {
            return Err(bad(format!(
                "manifest lists {} batch-norm entries, model has {}",
                manifest.bn.len(),
                net.bn_running.len()
            )));
        }
        for (entry, stats) in manifest.bn.iter().zip(&mut net.bn_running) {
            let c = stats.mean.len();
            if entry.channels != c {
                return Err(bad(format!(
                    "batch-norm entry {} has {} channels, model has {c}",
                    entry.index, entry.channels
                )));
            }
            let t = Tensor::load(&dir.join(&entry.file))?;
            if t.shape() != [2, c] {
                return Err(Error::CheckpointFormat {
                    path: dir.join(&entry.file),
                    detail: format!("expected shape [2, {c}], got {:?}", t.shape()),
                });
            }
            stats.mean.copy_from_slice(&t.data()[..c]);
            stats.var.copy_from_slice(&t.data()[c..]);
        }
        Ok(net)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_plan(
    spec: &ModelSpec,
    defs: &[ParamDef],
    params: &[f64],
    plan: &[PlanOp],
    bn: &mut [BnRunning],
    g: &mut Graph,
    batch: &Tensor,
    mode: BnMode,
) -> Result<ForwardPass> {
    let [_, c, _, _] = batch.dims4("network input")?;
    if c != IN_CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "network input",
            detail: format!("expected {IN_CHANNELS} channel(s), got {c}"),
        });
    }
    let param_vars: Vec<Var> = defs
        .iter()
        .map(|d| {
            let t = Tensor::new(d.shape.clone(), params[d.offset..d.offset + d.len()].to_vec())
                .expect("parameter definitions stay consistent");
            g.param(t)
        })
        .collect();
    let cbr_vars = |ids: &CbrIds| CbrVars {
        weight: param_vars[ids.weight],
        bias: param_vars[ids.bias],
        gamma: param_vars[ids.gamma],
        shift: param_vars[ids.shift],
    };

    let mut cur = g.input(batch.clone());
    let mut saved: Vec<Option<Var>> = vec![None; spec.blocks.len() / 2];
    for op in plan {
        cur = match op {
            PlanOp::Cbr(ids) => cbr(g, cur, cbr_vars(ids), &mut bn[ids.bn], mode)?,
            PlanOp::DenseBlock { layers, cfg } => {
                let vars: Vec<CbrVars> = layers.iter().map(&cbr_vars).collect();
                let start = layers[0].bn;
                dense_block_forward(g, cur, &vars, &mut bn[start..start + layers.len()], mode, cfg)?
            }
            PlanOp::Transition {
                weight,
                bias,
                compression,
            } => compress_channels(g, cur, param_vars[*weight], param_vars[*bias], *compression)?,
            PlanOp::MaxPool => g.max_pool2x2(cur)?,
            PlanOp::UpsampleConv { weight, bias } => {
                let up = g.upsample2x(cur)?;
                g.conv2d(up, param_vars[*weight], param_vars[*bias], Padding::Same)?
            }
            PlanOp::SaveSkip(slot) => {
                saved[*slot] = Some(cur);
                cur
            }
            PlanOp::ConcatSkip(slot) => {
                let skip = saved[*slot].take().ok_or(Error::ShapeMismatch {
                    op: "skip_concat",
                    detail: format!("skip slot {slot} was never saved"),
                })?;
                g.concat_channels(skip, cur)?
            }
            PlanOp::FinalConv { weight, bias } => {
                g.conv2d(cur, param_vars[*weight], param_vars[*bias], Padding::Same)?
            }
        };
    }
    Ok(ForwardPass {
        logits: cur,
        param_vars,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelSpec,
    params: Vec<ManifestParam>,
    bn: Vec<ManifestBn>,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestBn {
    index: usize,
    channels: usize,
    file: String,
}
