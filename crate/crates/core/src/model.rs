//! The network: attention CNN over context grids, event MLP, fusion,
//! energy head and three task heads.
//!
//! ```text
//! grid (18,H,W) ─ [conv3x3 → relu → channel attn → spatial attn] x2 ─ GAP ─ dense ─ relu ─ h_s (32)
//! features (16) ─ dense ─ relu ─ dense ─ relu ─ h_e (32)
//! z = tanh(dense([h_s; h_e]))                      (64)
//! E = dense(relu(dense(z)))                        (1)
//! z~ = [z; tanh E]                                 (65)
//! trunk = relu(dense(z~))                          (32)
//! p_a, p_t, p_f = sigmoid(dense(trunk))            (1 each)
//! ```
//!
//! All parameters, including the four physics raw scalars, live in one flat
//! vector described by a [`ShapeTable`].

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::features::FEATURE_DIM;
use crate::gridenc::GRID_CHANNELS;
use crate::physics::PhysicsParams;
use crate::{Error, Result};

pub const FUSION_DIM: usize = 64;
pub const AUGMENTED_DIM: usize = FUSION_DIM + 1;
pub const PHYSICS_BLOCK: &str = "physics.raw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_channels: usize,
    /// Output channels of each conv block.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub attention_reduction: usize,
    pub spatial_kernel: usize,
    /// Width of `h_s`.
    pub spatial_dim: usize,
    pub feature_dim: usize,
    /// Widths of the event MLP layers; the last is the width of `h_e`.
    pub event_dims: Vec<usize>,
    pub energy_hidden: usize,
    pub trunk_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_channels: GRID_CHANNELS,
            conv_channels: vec![16, 32],
            kernel_size: 3,
            attention_reduction: 4,
            spatial_kernel: 7,
            spatial_dim: 32,
            feature_dim: FEATURE_DIM,
            event_dims: vec![32, 32],
            energy_hidden: 32,
            trunk_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.conv_channels.is_empty() || self.event_dims.is_empty() {
            return bad("at least one conv block and one event layer are required");
        }
        if self.kernel_size.is_multiple_of(2) || self.spatial_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd");
        }
        if self.attention_reduction == 0
            || self
                .conv_channels
                .iter()
                .any(|c| c / self.attention_reduction == 0)
        {
            return bad("attention reduction leaves a zero-width gate");
        }
        let widths = [
            self.grid_channels,
            self.spatial_dim,
            self.feature_dim,
            self.energy_hidden,
            self.trunk_dim,
        ];
        if widths.contains(&0) || self.event_dims.contains(&0) || self.conv_channels.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Subject to weight decay.
    pub decay: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered partition of the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTable {
    pub blocks: Vec<Block>,
}

impl ShapeTable {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>, decay: bool| {
            let len: usize = shape.iter().product();
            blocks.push(Block {
                name,
                shape,
                offset,
                decay,
            });
            offset += len;
        };
        let dense =
            |add: &mut dyn FnMut(String, Vec<usize>, bool), name: &str, i: usize, o: usize| {
                add(format!("{name}.weight"), vec![i, o], true);
                add(format!("{name}.bias"), vec![o], false);
            };
        let k = cfg.kernel_size;
        let mut cin = cfg.grid_channels;
        for (b, &cout) in cfg.conv_channels.iter().enumerate() {
            add(format!("conv{b}.weight"), vec![cout, cin, k, k], true);
            add(format!("conv{b}.bias"), vec![cout], false);
            let r = cout / cfg.attention_reduction;
            dense(&mut add, &format!("channel_attn{b}.fc1"), cout, r);
            dense(&mut add, &format!("channel_attn{b}.fc2"), r, cout);
            let s = cfg.spatial_kernel;
            add(format!("spatial_attn{b}.weight"), vec![1, 2, s, s], true);
            add(format!("spatial_attn{b}.bias"), vec![1], false);
            cin = cout;
        }
        dense(&mut add, "spatial_proj", cin, cfg.spatial_dim);
        let mut width = cfg.feature_dim;
        for (l, &d) in cfg.event_dims.iter().enumerate() {
            dense(&mut add, &format!("event{l}"), width, d);
            width = d;
        }
        dense(&mut add, "fusion", cfg.spatial_dim + width, FUSION_DIM);
        dense(&mut add, "energy0", FUSION_DIM, cfg.energy_hidden);
        dense(&mut add, "energy1", cfg.energy_hidden, 1);
        dense(&mut add, "trunk", AUGMENTED_DIM, cfg.trunk_dim);
        for head in ["head_aftershock", "head_tsunami", "head_foreshock"] {
            dense(&mut add, head, cfg.trunk_dim, 1);
        }
        add(PHYSICS_BLOCK.to_string(), vec![4], false);
        ShapeTable { blocks }
    }

    pub fn total_len(&self) -> usize {
        self.blocks.last().map(|b| b.offset + b.len()).unwrap_or(0)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Name of the block holding flat coordinate `i`.
    pub fn owner(&self, i: usize) -> Option<&str> {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&i))
            .map(|b| b.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub table: ShapeTable,
    pub values: Vec<f64>,
    pub seed: u64,
}

/// Fan-in uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases,
/// physics raws at `b = p = 1`, `c ≈ 0.0077`, `ΔM = 1.2`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let table = ShapeTable::for_config(config);
    let mut values = vec![0.0; table.total_len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &table.blocks {
        if b.name == PHYSICS_BLOCK {
            values[b.range()].copy_from_slice(&PhysicsParams::default().to_array());
        } else if b.decay {
            let fan_in: usize = match b.shape.len() {
                4 => b.shape[1] * b.shape[2] * b.shape[3],
                _ => b.shape[0],
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[b.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    Ok(ModelParams {
        config: config.clone(),
        table,
        values,
        seed,
    })
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn physics(&self) -> PhysicsParams {
        let b = self.table.block(PHYSICS_BLOCK).expect("physics block");
        PhysicsParams::from_slice(&self.values[b.range()]).expect("4 raw scalars")
    }

    pub fn set_physics(&mut self, raw: &PhysicsParams) {
        let r = self
            .table
            .block(PHYSICS_BLOCK)
            .expect("physics block")
            .range();
        self.values[r].copy_from_slice(&raw.to_array());
    }

    /// Puts the whole vector on `tape` as one leaf and slices it into
    /// blocks.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Result<Bound> {
        let flat = tape.leaf(Tensor::vector(self.values.clone()), requires_grad);
        bind_flat(tape, flat, &self.table, &self.config)
    }
}

/// Parameter blocks as tape nodes.
#[derive(Debug, Clone)]
pub struct Bound {
    pub flat: Var,
    blocks: Vec<Var>,
    table: ShapeTable,
    config: ModelConfig,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.table
            .index(name)
            .map(|i| self.blocks[i])
            .ok_or_else(|| Error::InvalidInput(format!("no parameter block `{name}`")))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Slices a flat parameter node into the blocks of `table`.
pub fn bind_flat(
    tape: &Tape,
    flat: Var,
    table: &ShapeTable,
    config: &ModelConfig,
) -> Result<Bound> {
    let n = tape.shape(flat);
    if n != [table.total_len()] {
        return Err(Error::shape(
            "bind",
            format!("flat parameters {n:?} for a table of {}", table.total_len()),
        ));
    }
    let mut blocks = Vec::with_capacity(table.blocks.len());
    for b in &table.blocks {
        let s = tape.slice(flat, 0, b.offset, b.len())?;
        blocks.push(tape.reshape(s, &b.shape)?);
    }
    Ok(Bound {
        flat,
        blocks,
        table: table.clone(),
        config: config.clone(),
    })
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).data().iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Numerical {
            layer: layer.to_string(),
        })
    }
}

/// `x (1, n) · W (n, m) + b`.
fn dense(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let m = tape.shape(b)[0];
    let y = tape.add(tape.matmul(x, w)?, tape.reshape(b, &[1, m])?)?;
    check_finite(tape, y, name)
}

fn conv_block(tape: &Tape, p: &Bound, b: usize, x: Var) -> Result<Var> {
    let name = format!("conv{b}");
    let y = tape.conv2d(
        x,
        p.get(&format!("{name}.weight"))?,
        Some(p.get(&format!("{name}.bias"))?),
    )?;
    let y = tape.relu(check_finite(tape, y, &name)?);
    let shape = tape.shape(y);
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    // channel attention
    let pooled = tape.reshape(tape.global_avg_pool(y)?, &[1, c])?;
    let hidden = tape.relu(dense(tape, p, &format!("channel_attn{b}.fc1"), pooled)?);
    let gate = tape.sigmoid(dense(tape, p, &format!("channel_attn{b}.fc2"), hidden)?);
    let gate = tape.broadcast(tape.reshape(gate, &[c, 1, 1])?, &[c, h, w])?;
    let y = tape.mul(y, gate)?;

    // spatial attention
    let mean = tape.mean_axis(y, 0)?;
    let max = tape.max_axis(y, 0)?;
    let maps = tape.concat(&[mean, max], 0)?;
    let sname = format!("spatial_attn{b}");
    let s = tape.conv2d(
        maps,
        p.get(&format!("{sname}.weight"))?,
        Some(p.get(&format!("{sname}.bias"))?),
    )?;
    let s = tape.sigmoid(check_finite(tape, s, &sname)?);
    let y = tape.mul(y, tape.broadcast(s, &[c, h, w])?)?;
    check_finite(tape, y, &name)
}

/// `h_s`, shape `(1, spatial_dim)`.
pub fn encode_spatial(tape: &Tape, p: &Bound, grid: Var) -> Result<Var> {
    let gs = tape.shape(grid);
    if gs.len() != 3 || gs[0] != p.config.grid_channels {
        return Err(Error::shape(
            "encode_spatial",
            format!("grid {gs:?} for {} channels", p.config.grid_channels),
        ));
    }
    let mut x = grid;
    for b in 0..p.config.conv_channels.len() {
        x = conv_block(tape, p, b, x)?;
    }
    let c = tape.shape(x)[0];
    let pooled = tape.reshape(tape.global_avg_pool(x)?, &[1, c])?;
    Ok(tape.relu(dense(tape, p, "spatial_proj", pooled)?))
}

/// `h_e`, shape `(1, event_dims.last())`.
pub fn encode_event(tape: &Tape, p: &Bound, features: Var) -> Result<Var> {
    let fs = tape.shape(features);
    if fs != [1, p.config.feature_dim] {
        return Err(Error::shape(
            "encode_event",
            format!("features {fs:?}, expected [1, {}]", p.config.feature_dim),
        ));
    }
    let mut h = features;
    for l in 0..p.config.event_dims.len() {
        h = tape.relu(dense(tape, p, &format!("event{l}"), h)?);
    }
    Ok(h)
}

/// Scalar energy `E(z)` as a `(1, 1)` node.
pub fn energy(tape: &Tape, p: &Bound, z: Var) -> Result<Var> {
    let h = tape.relu(dense(tape, p, "energy0", z)?);
    dense(tape, p, "energy1", h)
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub p_aftershock: Var,
    pub p_tsunami: Var,
    pub p_foreshock: Var,
    pub energy: Var,
    /// `(1, 64)`.
    pub z: Var,
}

pub fn forward(tape: &Tape, p: &Bound, grid: Var, features: Var) -> Result<Forward> {
    let hs = encode_spatial(tape, p, grid)?;
    let he = encode_event(tape, p, features)?;
    let z = tape.tanh(dense(tape, p, "fusion", tape.concat(&[hs, he], 1)?)?);
    let e = energy(tape, p, z)?;
    let zt = tape.concat(&[z, tape.tanh(e)], 1)?;
    let trunk = tape.relu(dense(tape, p, "trunk", zt)?);
    let head = |name: &str| -> Result<Var> { Ok(tape.sigmoid(dense(tape, p, name, trunk)?)) };
    Ok(Forward {
        p_aftershock: head("head_aftershock")?,
        p_tsunami: head("head_tsunami")?,
        p_foreshock: head("head_foreshock")?,
        energy: e,
        z,
    })
}

/// Plain values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub p_aftershock: f64,
    pub p_tsunami: f64,
    pub p_foreshock: f64,
    pub energy: f64,
    pub z: Vec<f64>,
}

/// Forward pass without gradient bookkeeping.
pub fn predict(params: &ModelParams, grid: &Tensor, features: &[f64]) -> Result<Prediction> {
    let tape = Tape::new();
    let p = params.bind(&tape, false)?;
    let g = tape.constant(grid.clone());
    let f = tape.constant(Tensor::new(vec![1, features.len()], features.to_vec())?);
    let out = forward(&tape, &p, g, f)?;
    let z = tape.value(out.z).data().to_vec();
    Ok(Prediction {
        p_aftershock: tape.item(out.p_aftershock),
        p_tsunami: tape.item(out.p_tsunami),
        p_foreshock: tape.item(out.p_foreshock),
        energy: tape.item(out.energy),
        z,
    })
}

pub const CHECKPOINT_FORMAT: u32 = 1;
const VALUES_MARKER: &str = "%% values";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    seed: u64,
    parameter_count: usize,
    physics: crate::physics::Derived,
    model: ModelConfig,
    shapes: Vec<Block>,
    #[serde(default)]
    pipeline: toml::Table,
}

/// A parameter vector with the pipeline settings it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form settings (grid, features, labels) needed to reuse the model.
    pub pipeline: toml::Table,
}

/// Text checkpoint: a TOML header, a `%% values` line, then one value per
/// line with 17 significant digits.
pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut writer: W) -> Result<()> {
    let p = &ckpt.params;
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT,
        seed: p.seed,
        parameter_count: p.len(),
        physics: p.physics().derive(),
        model: p.config.clone(),
        shapes: p.table.blocks.clone(),
        pipeline: ckpt.pipeline.clone(),
    };
    let mut text = toml::to_string(&header)
        .map_err(|e| Error::Parse(format!("serialising checkpoint header: {e}")))?;
    text.push_str(VALUES_MARKER);
    text.push('\n');
    for v in &p.values {
        writeln!(text, "{v:.16e}").expect("write to String");
    }
    writer
        .write_all(text.as_bytes())
        .map_err(|e| Error::Parse(format!("writing checkpoint: {e}")))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(ckpt, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<R: std::io::Read>(reader: R) -> Result<Checkpoint> {
    let mut header = String::new();
    let mut lines = BufReader::new(reader).lines();
    let bad = |m: String| Error::Parse(format!("checkpoint: {m}"));
    loop {
        match lines.next() {
            Some(line) => {
                let line = line.map_err(|e| bad(e.to_string()))?;
                if line == VALUES_MARKER {
                    break;
                }
                header.push_str(&line);
                header.push('\n');
            }
            None => return Err(bad(format!("missing `{VALUES_MARKER}` line"))),
        }
    }
    let h: CheckpointHeader = toml::from_str(&header).map_err(|e| bad(e.to_string()))?;
    if h.format_version != CHECKPOINT_FORMAT {
        return Err(bad(format!(
            "unsupported format version {}",
            h.format_version
        )));
    }
    let mut values = Vec::with_capacity(h.parameter_count);
    for line in lines {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        values.push(
            line.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("`{line}`: {e}")))?,
        );
    }
    let table = ShapeTable::for_config(&h.model);
    if table.blocks != h.shapes
        || values.len() != table.total_len()
        || values.len() != h.parameter_count
    {
        return Err(bad(format!(
            "shape table or value count ({}) does not match the model config",
            values.len()
        )));
    }
    Ok(Checkpoint {
        params: ModelParams {
            config: h.model,
            table,
            values,
            seed: h.seed,
        },
        pipeline: h.pipeline,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check_coords;

    fn small() -> ModelConfig {
        ModelConfig {
            conv_channels: vec![4, 8],
            spatial_dim: 8,
            event_dims: vec![8, 8],
            energy_hidden: 8,
            trunk_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn random_input(seed: u64, h: usize, w: usize) -> (Tensor, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = (0..GRID_CHANNELS * h * w)
            .map(|_| {
                if rng.random::<f64>() < 0.4 {
                    rng.random_range(0.0..2.0)
                } else {
                    0.0
                }
            })
            .collect();
        let feats = (0..FEATURE_DIM)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        (Tensor::new(vec![GRID_CHANNELS, h, w], grid).unwrap(), feats)
    }

    #[test]
    fn parameter_count_matches_table() {
        let p = init_params(&ModelConfig::default(), 1).unwrap();
        assert_eq!(p.len(), p.table.total_len());
        let mut next = 0;
        for b in &p.table.blocks {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, p.len());
        let phys = p.physics().derive();
        assert_eq!((phys.b, phys.p, phys.delta_m), (1.0, 1.0, 1.2));
        assert!(!p.table.block(PHYSICS_BLOCK).unwrap().decay);
    }

    #[test]
    fn init_is_seeded_and_fan_in_bounded() {
        let a = init_params(&ModelConfig::default(), 7).unwrap();
        let b = init_params(&ModelConfig::default(), 7).unwrap();
        let c = init_params(&ModelConfig::default(), 8).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        let conv = a.table.block("conv0.weight").unwrap();
        let bound = 1.0 / ((18 * 9) as f64).sqrt();
        assert!(a.values[conv.range()].iter().all(|v| v.abs() < bound));
        let bias = a.table.block("fusion.bias").unwrap();
        assert!(a.values[bias.range()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_ranges_and_determinism() {
        let p = init_params(&ModelConfig::default(), 3).unwrap();
        let (grid, feats) = random_input(4, 6, 6);
        let a = predict(&p, &grid, &feats).unwrap();
        let b = predict(&p, &grid, &feats).unwrap();
        assert_eq!(a, b);
        for q in [a.p_aftershock, a.p_tsunami, a.p_foreshock] {
            assert!(q > 0.0 && q < 1.0);
        }
        assert!(a.energy.is_finite());
        assert_eq!(a.z.len(), FUSION_DIM);
        assert!(a.energy.tanh().abs() < 1.0);
    }

    #[test]
    fn zero_grid_reduces_to_bias_path() {
        let p = init_params(&small(), 5).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape, false).unwrap();
        let zero = tape.constant(Tensor::zeros(&[GRID_CHANNELS, 5, 5]));
        let hs = encode_spatial(&tape, &bound, zero).unwrap();
        // with zero input and zero conv biases every activation is zero, so
        // h_s = relu(spatial_proj.bias) = 0
        assert!(tape.value(hs).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn channel_gates_lie_in_unit_interval() {
        let p = init_params(&small(), 9).unwrap();
        let (grid, _) = random_input(10, 5, 5);
        let tape = Tape::new();
        let bound = p.bind(&tape, false).unwrap();
        let g = tape.constant(grid);
        let y = tape.relu(
            tape.conv2d(
                g,
                bound.get("conv0.weight").unwrap(),
                Some(bound.get("conv0.bias").unwrap()),
            )
            .unwrap(),
        );
        let pooled = tape
            .reshape(tape.global_avg_pool(y).unwrap(), &[1, 4])
            .unwrap();
        let h = tape.relu(dense(&tape, &bound, "channel_attn0.fc1", pooled).unwrap());
        let gate = tape.sigmoid(dense(&tape, &bound, "channel_attn0.fc2", h).unwrap());
        assert!(tape.value(gate).data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn spatial_structure_matters() {
        let p = init_params(&small(), 11).unwrap();
        let (grid, feats) = random_input(12, 5, 5);
        let mut shuffled = grid.data().to_vec();
        // reverse the cells of every channel plane
        for plane in shuffled.chunks_mut(25) {
            plane.reverse();
        }
        let shuffled = Tensor::new(grid.shape().to_vec(), shuffled).unwrap();
        let a = predict(&p, &grid, &feats).unwrap();
        let b = predict(&p, &shuffled, &feats).unwrap();
        assert_ne!(a.z, b.z);
    }

    #[test]
    fn input_channel_sensitivity() {
        let p = init_params(&small(), 13).unwrap();
        let (grid, feats) = random_input(14, 5, 5);
        let tape = Tape::new();
        let bound = p.bind(&tape, false).unwrap();
        let g = tape.param(grid);
        let f = tape.constant(Tensor::new(vec![1, FEATURE_DIM], feats).unwrap());
        let out = forward(&tape, &bound, g, f).unwrap();
        let grads = tape.backward(tape.sum(out.p_aftershock)).unwrap();
        let dg = grads.get(g).unwrap();
        assert!(dg[..25].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn end_to_end_gradient_check() {
        let p = init_params(&small(), 15).unwrap();
        let (grid, feats) = random_input(16, 4, 4);
        let cfg = small();
        let table = p.table.clone();
        let f = |tape: &Tape, x: Var| -> Result<Var> {
            let bound = bind_flat(tape, x, &table, &cfg)?;
            let g = tape.constant(grid.clone());
            let fe = tape.constant(Tensor::new(vec![1, FEATURE_DIM], feats.clone())?);
            let out = forward(tape, &bound, g, fe)?;
            let s = tape.add(tape.add(out.p_aftershock, out.p_tsunami)?, out.p_foreshock)?;
            let s = tape.add(s, tape.square(out.energy))?;
            Ok(tape.sum(s))
        };
        let coords: Vec<usize> = (0..p.len()).step_by(7).collect();
        // gradients of deep attention weights reach 1e-9; at h = 1e-5 the
        // difference quotient's rounding noise (~1e-11) swamps them
        let r = grad_check_coords(f, &Tensor::vector(p.values.clone()), 1e-3, &coords).unwrap();
        assert!(
            r.max_rel_error < 1e-4,
            "{r:?} at {:?}",
            r.worst_coordinate.and_then(|i| p.table.owner(i))
        );
        assert!(r.checked > coords.len() / 2);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let p = init_params(&small(), 21).unwrap();
        let mut pipeline = toml::Table::new();
        pipeline.insert("cell_size".into(), toml::Value::Float(2.0));
        let ckpt = Checkpoint {
            params: p,
            pipeline,
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let ckpt = Checkpoint {
            params: init_params(&small(), 1).unwrap(),
            pipeline: toml::Table::new(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text
            .lines()
            .take(text.lines().count() - 3)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            read_checkpoint(truncated.as_bytes()),
            Err(Error::Parse(_))
        ));
        assert!(read_checkpoint("format_version = 1\n".as_bytes()).is_err());
    }
}
